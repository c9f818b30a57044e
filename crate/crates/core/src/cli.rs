//! Command-line driver. Every setting of [`Config`] is also a global flag
//! (`--key-name value`); flags override the config file, which overrides
//! the defaults.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::info;

use crate::config::{schema, Config, CONFIG_ENV};
use crate::dataset::{condition_for, load_pairs, read_manifest, save_pair, write_manifest, Manifest, ManifestRecord, ShapeFamily};
use crate::error::{Error, Result};
use crate::experiment::{eval_cases, make_pairs, parse_splits, save_sweep, sweep_schedules, training_assets, view_ring};
use crate::geometry::{load_geometry, normalize_mesh, normalize_unit_cube, sample_surface, write_ply, Geometry, GeometryFormat, PointCloud};
use crate::latent::{config_hash, decode_ss, encode_ss, mask_tensor, ModelFile};
use crate::metrics::{emit_report, visible_region_eval, ReportFormat};
use crate::numcore::Rng;
use crate::sampler::{repair_noisy_prior, staged_sample};
use crate::train::{reconstruction_iou, train_inpaint, train_vae};
use crate::visibility::{compute_tau, extract_visible, observation_mask, render_depth_mesh};
use crate::voxel::{downsample_mask, voxel_centers, voxelize_counting, OccupancyGrid};

/// Short aliases accepted next to the schema-derived flag names.
const ALIASES: &[(&str, &str)] = &[("ring_views", "views")];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn family_arg() -> Arg {
    Arg::new("family")
        .long("family")
        .value_name("NAME")
        .default_value("boxes")
        .help("shape family used as the condition: boxes, spheres, unions, l-shapes")
}

/// The full command tree.
pub fn command() -> Command {
    let mut cmd = Command::new("p23d")
        .about("Single-view structural 3D completion with masked latent flow matching")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .value_parser(clap::value_parser!(PathBuf))
                .help(format!("key = value configuration file [default: ${CONFIG_ENV} if set]")),
        );
    for (key, default, doc) in schema() {
        let mut arg = Arg::new(key)
            .long(flag_name(key))
            .value_name("VALUE")
            .global(true)
            .help(format!("{doc} [default: {default}]"));
        for &(k, alias) in ALIASES {
            if k == key {
                arg = arg.visible_alias(alias);
            }
        }
        cmd = cmd.arg(arg);
    }
    cmd.subcommand(
        Command::new("sample-surface")
            .about("Normalize a mesh and sample points uniformly on its surface")
            .arg(path_arg("input", "mesh (.obj or .ply)"))
            .arg(path_arg("out", "output point cloud (.ply)"))
            .arg(
                Arg::new("count")
                    .long("count")
                    .value_parser(clap::value_parser!(usize))
                    .help("number of points [default: surface_samples]"),
            ),
    )
    .subcommand(
        Command::new("visibility")
            .about("Keep the surface samples of a mesh that are visible from one ring view")
            .arg(path_arg("input", "mesh (.obj or .ply)"))
            .arg(path_arg("out", "visible points (.ply)"))
            .arg(
                Arg::new("view")
                    .long("view")
                    .value_parser(clap::value_parser!(usize))
                    .default_value("0")
                    .help("ring view index"),
            )
            .arg(
                Arg::new("depth")
                    .long("depth")
                    .value_name("PATH")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("also write the rendered depth map (.pfm)"),
            ),
    )
    .subcommand(
        Command::new("voxelize")
            .about("Voxelize a point cloud (or a mesh's surface samples) in the unit cube")
            .arg(
                Arg::new("in")
                    .value_name("INPUT")
                    .value_parser(clap::value_parser!(PathBuf))
                    .required(true)
                    .help("point cloud or mesh (.ply, .xyz, .obj)"),
            )
            .arg(
                Arg::new("out")
                    .value_name("OUTPUT")
                    .value_parser(clap::value_parser!(PathBuf))
                    .required(true)
                    .help("grid file (.voxg)"),
            )
            .arg(
                Arg::new("normalize")
                    .long("normalize")
                    .action(ArgAction::SetTrue)
                    .help("rescale the input into the unit cube first"),
            ),
    )
    .subcommand(
        Command::new("make-dataset")
            .about("Build training pairs for the synthetic corpus with a trained autoencoder")
            .arg(path_arg("vae", "autoencoder checkpoint"))
            .arg(path_arg("out", "output directory (manifest.tsv and pairs/)")),
    )
    .subcommand(
        Command::new("train-vae")
            .about("Train the occupancy autoencoder on the synthetic corpus")
            .arg(path_arg("out", "checkpoint to write")),
    )
    .subcommand(
        Command::new("train-inpaint")
            .about("Train the inpainting network on a dataset manifest")
            .arg(path_arg("vae", "autoencoder checkpoint the dataset was built with"))
            .arg(path_arg("manifest", "dataset manifest"))
            .arg(path_arg("out", "checkpoint to write")),
    )
    .subcommand(
        Command::new("generate")
            .about("Complete a visible-region prior grid")
            .arg(path_arg("checkpoint", "inpainting checkpoint"))
            .arg(path_arg("prior", "prior grid (.voxg)"))
            .arg(path_arg("out", "generated grid (.voxg)"))
            .arg(family_arg()),
    )
    .subcommand(
        Command::new("repair-prior")
            .about("Repair a noisy prior, then complete it")
            .arg(path_arg("checkpoint", "inpainting checkpoint"))
            .arg(path_arg("prior", "prior grid (.voxg)"))
            .arg(path_arg("out", "generated grid (.voxg)"))
            .arg(family_arg()),
    )
    .subcommand(
        Command::new("eval")
            .about("Chamfer distance and F-score, overall and inside the visible region")
            .arg(path_arg("gen", "generated grid"))
            .arg(path_arg("gt", "ground-truth grid"))
            .arg(path_arg("prior", "prior grid defining the visible region"))
            .arg(path_arg("out", "report file"))
            .arg(
                Arg::new("format")
                    .long("format")
                    .default_value("csv")
                    .help("report format: csv or jsonl"),
            )
            .arg(Arg::new("id").long("id").default_value("object").help("record identifier")),
    )
    .subcommand(
        Command::new("sweep-schedule")
            .about("Evaluate inpaint:refine step splits on held-out synthetic shapes")
            .arg(path_arg("checkpoint", "inpainting checkpoint"))
            .arg(path_arg("out", "CSV with one row per split"))
            .arg(
                Arg::new("splits")
                    .long("splits")
                    .default_value("50:0,40:10,30:20,25:25,20:30,10:40")
                    .help("comma-separated inpaint:refine step counts"),
            ),
    )
    .subcommand(
        Command::new("export-ply")
            .about("Write the voxel centers of a grid as a point cloud")
            .arg(path_arg("input", "grid (.voxg)"))
            .arg(path_arg("out", "point cloud (.ply)")),
    )
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve_config(m: &ArgMatches) -> Result<Config> {
    let file = m
        .get_one::<PathBuf>("config")
        .cloned()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match file {
        Some(p) => Config::load(&p)?,
        None => Config::default(),
    };
    for (key, _, _) in schema() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required argument")
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn load_mesh(path: &Path) -> Result<crate::geometry::TriangleMesh> {
    match load_geometry(path, GeometryFormat::from_path(path)?)? {
        Geometry::Mesh(m) => normalize_mesh(&m),
        Geometry::Cloud(_) => Err(Error::invalid(format!("{} holds a point cloud, a mesh is required", path.display()))),
    }
}

fn save_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_ply(cloud, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_grid(path: &Path) -> Result<OccupancyGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(OccupancyGrid::read(&mut bytes.as_slice())?.0)
}

fn write_grid(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    grid.write(&mut w, [-0.5, -0.5, -0.5, 0.5, 0.5, 0.5])?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn dataset_hash(cfg: &Config, vae_file: &ModelFile) -> Result<String> {
    Ok(config_hash(&format!("{}|{}", cfg.dataset_text(), vae_file.get("config_hash")?)))
}

/// Parses arguments and runs one subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command()
        .try_get_matches_from(args)
        .map_err(|e| Error::invalid(e.to_string()))?;
    dispatch(&matches)
}

pub fn dispatch(matches: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(matches)?;
    if cfg.threads > 0 {
        // A pool set up by an earlier run in this process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let (name, m) = matches.subcommand().expect("subcommand required");
    eprintln!("# p23d {name}, seed {}\n{}", cfg.seed, cfg.to_text().trim_end());
    match name {
        "sample-surface" => {
            let mesh = load_mesh(path(m, "input"))?;
            let count = m.get_one::<usize>("count").copied().unwrap_or(cfg.surface_samples);
            let cloud = sample_surface(&mesh, count, &mut Rng::new(cfg.seed))?;
            save_ply(&cloud, path(m, "out"))
        }
        "visibility" => {
            let mesh = load_mesh(path(m, "input"))?;
            let ring = view_ring(&cfg)?;
            let view = *m.get_one::<usize>("view").expect("defaulted");
            let cam = ring
                .get(view)
                .ok_or_else(|| Error::invalid(format!("view {view} is outside the {}-view ring", ring.len())))?;
            let cloud = sample_surface(&mesh, cfg.surface_samples, &mut Rng::new(cfg.seed))?;
            let depth = render_depth_mesh(&mesh, cam);
            if let Some(p) = m.get_one::<PathBuf>("depth") {
                let mut w = create(p)?;
                depth.write_pfm(&mut w)?;
                w.flush().map_err(|e| Error::io(p, e))?;
            }
            let tau = compute_tau(&depth, cfg.tau_fraction)?;
            let mask = observation_mask(&cloud, cam, &depth, tau)?;
            let visible = extract_visible(&cloud, &mask)?;
            info!("{} of {} points visible", visible.len(), cloud.len());
            save_ply(&visible, path(m, "out"))
        }
        "voxelize" => {
            let input = path(m, "in");
            let geometry = load_geometry(input, GeometryFormat::from_path(input)?)?;
            let geometry = if m.get_flag("normalize") {
                normalize_unit_cube(&geometry)?.0
            } else {
                geometry
            };
            let cloud = match geometry {
                Geometry::Cloud(c) => c,
                Geometry::Mesh(mesh) => sample_surface(&mesh, cfg.surface_samples, &mut Rng::new(cfg.seed))?,
            };
            let (grid, clamped) = voxelize_counting(&cloud, cfg.n)?;
            info!("{} occupied cells, {clamped} points clamped", grid.count());
            let (lo, hi) = cloud.bounds().expect("nonempty");
            let mut w = create(path(m, "out"))?;
            grid.write(&mut w, [lo.x, lo.y, lo.z, hi.x, hi.y, hi.z].map(|v| v as f32))?;
            w.flush().map_err(|e| Error::io(path(m, "out"), e))
        }
        "train-vae" => {
            let assets = training_assets(&cfg)?;
            let grids: Vec<OccupancyGrid> = assets.into_iter().map(|a| a.full_grid).collect();
            let tc = cfg.vae_train_config();
            let (vae, log) = train_vae(&grids, cfg.vae_config(), &tc)?;
            let iou = reconstruction_iou(&vae, &grids)?;
            println!("train IoU {iou:.4} after {} steps", log.losses.len());
            let text = format!("{tc} shapes={} surface_samples={}", cfg.shapes, cfg.surface_samples);
            ModelFile::from_vae(&vae, &text).save(path(m, "out"))
        }
        "make-dataset" => {
            let vae_file = ModelFile::load(path(m, "vae"))?;
            let vae = vae_file.to_vae()?;
            if vae.config.n != cfg.n || vae.config.r != cfg.r || vae.config.c_s != cfg.c_s {
                return Err(Error::Config {
                    key: "n".into(),
                    msg: "autoencoder resolution or channels differ from the configuration".into(),
                });
            }
            let hash = dataset_hash(&cfg, &vae_file)?;
            let out = path(m, "out");
            let pair_dir = out.join("pairs");
            fs::create_dir_all(&pair_dir).map_err(|e| Error::io(&pair_dir, e))?;
            let assets = training_assets(&cfg)?;
            let pairs = make_pairs(&cfg, &assets, &vae)?;
            let mut records = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let rel = PathBuf::from("pairs").join(format!("{}_v{:02}.p23d", p.asset_id, p.view));
                save_pair(&out.join(&rel), p)?;
                records.push(ManifestRecord {
                    asset_id: p.asset_id.clone(),
                    view: p.view,
                    pair_path: rel,
                    config_hash: hash.clone(),
                });
            }
            write_manifest(&out.join("manifest.tsv"), &Manifest { records })?;
            println!("{} pairs from {} assets, configuration {hash}", pairs.len(), assets.len());
            Ok(())
        }
        "train-inpaint" => {
            let vae_file = ModelFile::load(path(m, "vae"))?;
            let vae = vae_file.to_vae()?;
            let manifest_path = path(m, "manifest");
            let manifest = read_manifest(manifest_path, Some(&dataset_hash(&cfg, &vae_file)?))?;
            let pairs = load_pairs(manifest_path, &manifest)?;
            let tc = cfg.inpaint_train_config();
            let (net, log) = train_inpaint(&pairs, cfg.inpaint_config(), &tc)?;
            let tail = &log.losses[log.losses.len().saturating_sub(100)..];
            println!("final mean loss {:.5} over the last {} steps", tail.iter().sum::<f64>() / tail.len() as f64, tail.len());
            ModelFile::from_inpaint(&net, &vae, &tc.to_string()).save(path(m, "out"))
        }
        "generate" | "repair-prior" => {
            let (net, vae) = ModelFile::load(path(m, "checkpoint"))?.to_inpaint()?;
            let prior = read_grid(path(m, "prior"))?;
            if prior.n() != vae.config.n {
                return Err(Error::shape("generate", format!("prior resolution {} vs model {}", prior.n(), vae.config.n)));
            }
            let family: ShapeFamily = m.get_one::<String>("family").expect("defaulted").parse()?;
            let cond = condition_for(family, net.config.cond_len);
            let m_s = mask_tensor(&downsample_mask(&prior, vae.config.r)?, net.config.c_m);
            let mut q_vis = encode_ss(&prior, &vae)?;
            let mut rng = Rng::new(cfg.seed);
            if name == "repair-prior" {
                q_vis = repair_noisy_prior(&net, &q_vis, &m_s, cfg.repair_k, cfg.repair_strength, &cond, &mut rng)?;
            }
            let out = staged_sample(&net, &q_vis, &m_s, &cond, cfg.schedule(), &mut rng, cfg.sample_options())?;
            if !out.latent.is_finite() {
                return Err(Error::NonFinite("sampled latent"));
            }
            let grid = decode_ss(&out.latent, &vae, cfg.decode_threshold)?;
            println!("{} occupied cells", grid.count());
            write_grid(&grid, path(m, "out"))
        }
        "eval" => {
            let gen = read_grid(path(m, "gen"))?;
            let gt = read_grid(path(m, "gt"))?;
            let prior = read_grid(path(m, "prior"))?;
            let format: ReportFormat = m.get_one::<String>("format").expect("defaulted").parse()?;
            let mut rec = visible_region_eval(&gen, &gt, &prior, cfg.r, cfg.fscore_threshold, cfg.chamfer_options())?;
            rec.id = m.get_one::<String>("id").expect("defaulted").clone();
            rec.seed = cfg.seed;
            println!("CD {:.5} F {:.4} visible CD {:.5} visible F {:.4}", rec.cd, rec.fscore, rec.vis_cd, rec.vis_fscore);
            emit_report(&[rec], path(m, "out"), format)
        }
        "sweep-schedule" => {
            let (net, vae) = ModelFile::load(path(m, "checkpoint"))?.to_inpaint()?;
            let splits = parse_splits(m.get_one::<String>("splits").expect("defaulted"))?;
            let cases = eval_cases(&cfg, &vae, None)?;
            let rows = sweep_schedules(&cfg, &net, &vae, &cases, &splits, cfg.fscore_threshold)?;
            for r in &rows {
                println!("{:>3}:{:<3} CD {:.5} F {:.4}", r.inpaint_steps, r.refine_steps, r.cd, r.fscore);
            }
            save_sweep(&rows, path(m, "out"))
        }
        "export-ply" => {
            let grid = read_grid(path(m, "input"))?;
            save_ply(&voxel_centers(&grid)?, path(m, "out"))
        }
        other => Err(Error::invalid(format!("unknown subcommand {other}"))),
    }
}
