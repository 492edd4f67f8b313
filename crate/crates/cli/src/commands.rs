use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use man3d::config::RunConfig;
use man3d::evaluation::MetricReport;
use man3d::scene_sim::{generate_sequence, parse_sequence, sequence_bytes, FrameRecord, SceneConfig};
use man3d::trainer::{checkpoint, evaluate, Trainer};
use man3d::Error;
use serde_json::json;

use crate::{bench, Common};

/// 0 ok, 1 usage, 2 data, 3 numerical.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(me) = cause.downcast_ref::<Error>() {
            return match me {
                Error::Numerical(_) => 3,
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
    }
    2
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    Ok(RunConfig::load(&text, &c.set)?)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<String> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let hash = cfg.hash()?;
    fs::write(out.join("config.txt"), cfg.dump()?).with_context(|| format!("cannot write to {}", out.display()))?;
    fs::write(out.join("config.hash"), format!("{hash}\n"))?;
    Ok(hash)
}

pub fn sequence_name(i: usize) -> String {
    format!("seq_{i:05}.bin")
}

pub fn generate(c: &Common, count: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.data.scene.seed = s;
    }
    let n = count.unwrap_or(cfg.data.num_sequences);
    let hash = prepare_out(&c.out, &cfg)?;
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let scene = SceneConfig {
            seed: cfg.data.scene.seed.wrapping_add(i as u64),
            ..cfg.data.scene.clone()
        };
        let frames = generate_sequence(&scene)?;
        let name = sequence_name(i);
        fs::write(c.out.join(&name), sequence_bytes(&frames)).with_context(|| format!("cannot write {name}"))?;
        files.push(json!({"file": name, "frames": frames.len(), "seed": scene.seed}));
    }
    let manifest = json!({
        "count": n,
        "seed": cfg.data.scene.seed,
        "config_hash": hash,
        "sequences": files,
    });
    fs::write(c.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    info!("wrote {n} sequences to {}", c.out.display());
    Ok(())
}

/// Every `*.bin` in `dir`, sorted by name. Unreadable files are skipped
/// with a warning; more than 10% of them aborts.
pub fn load_dataset(dir: &Path) -> anyhow::Result<Vec<Vec<FrameRecord>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read data dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    let mut corrupt = 0usize;
    for p in &paths {
        match fs::read(p).map_err(Error::from).and_then(|b| parse_sequence(&b)) {
            Ok(s) => out.push(s),
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                corrupt += 1;
            }
        }
    }
    if corrupt * 10 > paths.len() {
        return Err(Error::Data(format!("{corrupt} of {} sequence files are corrupt", paths.len())).into());
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no sequence files in {}", dir.display())).into());
    }
    Ok(out)
}

fn incompatible(cfg: &RunConfig, other: &man3d::trainer::ModelConfig) -> anyhow::Result<()> {
    let diff = cfg.structural_diff(other)?;
    if diff.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = diff.iter().map(|(k, a, b)| format!("  {k}: config {a}, checkpoint {b}")).collect();
    Err(Error::Incompatible(format!("checkpoint does not match config:\n{}", lines.join("\n"))).into())
}

fn write_report(out: &Path, stem: &str, r: &MetricReport) -> anyhow::Result<()> {
    fs::write(out.join(format!("{stem}.txt")), r.to_text())?;
    fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(r)? + "\n")?;
    Ok(())
}

pub fn train(c: &Common, data: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let hash = prepare_out(&c.out, &cfg)?;
    let seqs = load_dataset(data)?;
    let n_train = cfg.data.split(seqs.len());
    if n_train == 0 {
        return Err(Error::Data("no training sequences after the held-out split".into()).into());
    }
    let (train_set, held) = seqs.split_at(n_train);
    let mut tr = match resume {
        Some(p) => {
            let t = checkpoint::load(p, None).with_context(|| format!("cannot resume from {}", p.display()))?;
            incompatible(&cfg, &t.model.cfg)?;
            Trainer {
                cfg: cfg.train.clone(),
                ..t
            }
        }
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    info!("config {hash}: {} train / {} held-out sequences, starting at step {}", train_set.len(), held.len(), tr.step());
    let mut log = fs::OpenOptions::new().create(true).append(true).open(c.out.join("train_log.jsonl"))?;
    let ckpt = |tr: &Trainer| -> anyhow::Result<()> {
        let p = c.out.join(format!("ckpt_{:08}.m3dc", tr.step()));
        checkpoint::save(tr, &p)?;
        checkpoint::save(tr, &c.out.join("last.m3dc"))?;
        Ok(())
    };
    while tr.step() < cfg.train.steps {
        let rec = tr.train_on(train_set)?;
        if cfg.train.log_interval > 0 && rec.step % cfg.train.log_interval == 0 {
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            info!("step {} L_total {:.4} (fsd {:.4} mvaa {:.4} cv {:.4})", rec.step, rec.l_total, rec.l_fsd, rec.l_mvaa, rec.l_cv);
        }
        if cfg.train.checkpoint_interval > 0 && rec.step % cfg.train.checkpoint_interval == 0 {
            ckpt(&tr)?;
        }
    }
    if cfg.train.checkpoint_interval == 0 || tr.step() % cfg.train.checkpoint_interval != 0 || tr.step() == 0 {
        ckpt(&tr)?;
    }
    if held.is_empty() {
        warn!("held-out split is empty; skipping final metrics");
    } else {
        let report = evaluate(&tr.model, held, &cfg.train, &cfg.eval)?;
        write_report(&c.out, "metrics", &report)?;
    }
    Ok(())
}

pub fn eval(c: &Common, ckpt: &Path, data: &Path, plots: bool) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let tr = checkpoint::load(ckpt, None).with_context(|| format!("cannot load {}", ckpt.display()))?;
    incompatible(&cfg, &tr.model.cfg)?;
    prepare_out(&c.out, &cfg)?;
    let seqs = load_dataset(data)?;
    let report = evaluate(&tr.model, &seqs, &cfg.train, &cfg.eval)?;
    write_report(&c.out, "report", &report)?;
    if plots {
        fs::write(c.out.join("pr_overall.svg"), pr_svg(&report, "overall"))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

/// Precision-recall curves of one bucket, one polyline per IoU threshold.
pub fn pr_svg(r: &MetricReport, bucket: &str) -> String {
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let (w, h, m) = (400.0, 300.0, 40.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\">recall</text>\n\
         <text x=\"4\" y=\"{}\" font-size=\"12\">precision</text>\n",
        w - 2.0 * m,
        h - 2.0 * m,
        w / 2.0,
        h - 10.0,
        m - 8.0
    );
    for (n, row) in r.rows.iter().filter(|x| x.bucket == bucket).enumerate() {
        let pts: Vec<String> = row
            .pr_curve
            .iter()
            .map(|[rc, p]| format!("{:.1},{:.1}", m + rc * (w - 2.0 * m), h - m - p * (h - 2.0 * m)))
            .collect();
        let col = COLORS[n % COLORS.len()];
        s += &format!("<polyline fill=\"none\" stroke=\"{col}\" points=\"{}\"/>\n", pts.join(" "));
        s += &format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{col}\">IoU {:.2}</text>\n",
            w - m - 60.0,
            m + 14.0 * (n + 1) as f64,
            row.threshold
        );
    }
    s + "</svg>\n"
}

pub fn bench_nms(out: Option<&Path>, sides: &[usize], kernels: &[usize], num_out: usize, seed: u64) -> anyhow::Result<()> {
    if sides.is_empty() || kernels.is_empty() {
        bail!(Usage("need at least one size and one kernel".into()));
    }
    let rows = bench::run(sides, kernels, num_out, seed)?;
    let table = bench::table(&rows);
    print!("{table}");
    if let Some(best) = rows.iter().max_by_key(|r| r.locations) {
        println!("largest map: {} locations, greedy/maxpool time ratio {:.2}", best.locations, best.ratio());
    }
    if let Some(o) = out {
        fs::create_dir_all(o).with_context(|| format!("cannot create {}", o.display()))?;
        fs::write(o.join("bench_nms.txt"), &table)?;
    }
    Ok(())
}
