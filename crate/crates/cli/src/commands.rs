use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use qi2::config::RunConfig;
use qi2::datapipe::{self, Pipeline};
use qi2::evalkit;
use qi2::flowmatch::VelocityModel;
use qi2::mmdit::{self, Mmdit};
use qi2::promptforge;
use qi2::tensor::{checkpoint, check_op_suite};
use qi2::vae::Vae;
use qi2::workflow::{self, stream, stream_seed, LatentStats, Sampler};
use qi2::Error;

use crate::{CmdResult, Common, Failure};

const VAE_CKPT: &str = "vae.ckpt";
const DIT_CKPT: &str = "dit.ckpt";
const STATS_FILE: &str = "latent_stats.json";

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_dir(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    cfg.validate()?;
    cfg.write_resolved(dir)
}

/// Directory that holds a file output; `.` for bare file names.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> Result<Self, Error> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn line(&mut self, v: serde_json::Value) -> Result<(), Error> {
        writeln!(self.0, "{v}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<(), Error> {
        self.0.flush()?;
        Ok(())
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn gen_data(common: &Common, out: &Path, kind: Option<String>) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(k) = kind {
        cfg.data_kind = k;
    }
    prepare_dir(&cfg, out)?;
    if cfg.data_kind == "pipeline" {
        let corpus = datapipe::toy::write_toy_corpus(out, cfg.pipeline_toy_seed)?;
        println!("wrote {} records to {}", corpus.records.len(), out.join("manifest.jsonl").display());
    } else {
        let corpus = workflow::image_corpus(&cfg, &cfg.data_kind, stream::DIT_CORPUS)?;
        let manifest = evalkit::write_corpus(&corpus, out)?;
        println!("wrote {} items to {}", corpus.items.len(), manifest.display());
    }
    Ok(())
}

pub fn pipeline_run(common: &Common, stage: u8, input: &Path, out: &Path, report: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    prepare_dir(&cfg, &parent_dir(out))?;
    let records = datapipe::read_manifest(input)?;
    let pipeline = Pipeline::new(cfg.pipeline_config(), parent_dir(input))?;
    let (kept, rep) = pipeline.run_stage_pipeline(stage, records)?;
    datapipe::write_manifest(out, &kept)?;
    std::fs::write(report, rep.to_json())?;
    println!("stage {stage}: kept {} of {} admitted ({} excluded by mix)", rep.kept, rep.admitted, rep.excluded_by_mix);
    Ok(())
}

pub fn train_vae(common: &Common, out: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    prepare_dir(&cfg, out)?;
    let mut log = JsonLines::create(&out.join("vae_log.jsonl"))?;
    let mut log_err = None;
    let vae = workflow::train_vae(&cfg, |st| {
        if log_err.is_none() {
            log_err = log.line(json!({"step": st.step, "loss": st.total, "grad_norm": st.grad_norm, "parts": st.parts})).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.finish()?;
    checkpoint::save(vae.params(), &out.join(VAE_CKPT))?;
    let eval = workflow::vae_eval_images(&cfg)?;
    let (psnr, ssim) = workflow::reconstruction_metrics(&vae, &eval.images())?;
    write_json(&out.join("summary.json"), &json!({"psnr_db": psnr, "ssim": ssim, "checksum": checkpoint::checksum(vae.params())}))?;
    println!("psnr {psnr:.3} dB, ssim {ssim:.4}");
    Ok(())
}

fn load_vae(cfg: &RunConfig, path: &Path) -> Result<Vae, Error> {
    let mut vae = workflow::new_vae(cfg)?;
    checkpoint::load_into(vae.params_mut(), path)?;
    Ok(vae)
}

fn load_model_dir(cfg: &RunConfig, dir: &Path) -> Result<(Vae, Mmdit, LatentStats), Error> {
    let vae = load_vae(cfg, &dir.join(VAE_CKPT))?;
    let mut dit = workflow::new_dit(cfg)?;
    checkpoint::load_into(dit.params_mut(), &dir.join(DIT_CKPT))?;
    let stats = LatentStats::load(&dir.join(STATS_FILE))?;
    Ok((vae, dit, stats))
}

fn save_model_dir(dir: &Path, vae: &Vae, dit: &Mmdit, stats: &LatentStats) -> Result<(), Error> {
    checkpoint::save(vae.params(), &dir.join(VAE_CKPT))?;
    checkpoint::save(dit.params(), &dir.join(DIT_CKPT))?;
    stats.save(&dir.join(STATS_FILE))
}

pub fn train_dit(common: &Common, out: &Path, vae_path: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    prepare_dir(&cfg, out)?;
    let vae = load_vae(&cfg, vae_path)?;
    let mut log = JsonLines::create(&out.join("dit_log.jsonl"))?;
    let mut log_err = None;
    let (dit, stats) = workflow::train_dit(&cfg, &vae, |s, o| {
        if log_err.is_none() {
            log_err = log.line(json!({"step": s, "loss": o.loss, "grad_norm": o.grad_norm, "clipped_norm": o.clipped_norm})).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.finish()?;
    save_model_dir(out, &vae, &dit, &stats)?;
    println!("saved model to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn sample(common: &Common, out: &Path, model: Option<&Path>, prompt: Option<String>, steps: Option<usize>, w: Option<f64>, nfe: Option<usize>, count: Option<usize>) -> CmdResult {
    let mut cfg = load_config(common)?;
    cfg.sample_steps = steps.unwrap_or(cfg.sample_steps);
    cfg.sample_cfg = w.unwrap_or(cfg.sample_cfg);
    cfg.sample_nfe = nfe.unwrap_or(cfg.sample_nfe);
    cfg.sample_count = count.unwrap_or(cfg.sample_count);
    prepare_dir(&cfg, out)?;
    let (vae, dit, stats) = match model {
        Some(dir) => load_model_dir(&cfg, dir)?,
        None => {
            eprintln!("no --model given; sampling from an untrained seeded model");
            (workflow::new_vae(&cfg)?, workflow::new_dit(&cfg)?, LatentStats { mean: 0.0, std: 1.0 })
        }
    };
    let prompts: Vec<String> = (0..cfg.sample_count).map(|i| prompt.clone().unwrap_or_else(|| evalkit::shape_caption(i % cfg.data_classes))).collect();
    let sampler = match nfe {
        Some(n) => Sampler::Student { nfe: n },
        None => Sampler::Euler { steps: cfg.sample_steps, cfg: cfg.sample_cfg },
    };
    let mut rng = workflow::stream_rng(&cfg, stream::SAMPLE);
    let images = workflow::sample_images(&cfg, &vae, &dit, &stats, &prompts, sampler, &mut rng)?;
    let mut index = String::new();
    for (i, (img, p)) in images.iter().zip(&prompts).enumerate() {
        let name = format!("sample_{i:03}.png");
        evalkit::save_png(img, &out.join(&name))?;
        index.push_str(&format!("{name}\t{p}\n"));
    }
    std::fs::write(out.join("prompts.tsv"), index)?;
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

pub fn distill(common: &Common, out: &Path, teacher_path: Option<&Path>) -> CmdResult {
    let cfg = load_config(common)?;
    prepare_dir(&cfg, out)?;
    let teacher = match teacher_path {
        Some(p) => {
            let mut t = workflow::toy_flow_model(&cfg);
            checkpoint::load_into(t.params_mut(), p)?;
            t
        }
        None => workflow::train_toy_teacher(&cfg, |_, _| {})?,
    };
    checkpoint::save(teacher.params(), &out.join("teacher.ckpt"))?;
    let mut log = JsonLines::create(&out.join("distill_log.jsonl"))?;
    let mut log_err = None;
    let student = workflow::distill_toy(&cfg, &teacher, |s, st| {
        if log_err.is_none() {
            log_err = log
                .line(json!({"step": s, "fake_loss": st.fake_loss, "multiplier_scale": st.multiplier_scale, "grad_norm": st.grad_norm}))
                .err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.finish()?;
    checkpoint::save(student.params(), &out.join("student.ckpt"))?;
    let (t, s) = workflow::toy_sample_pair(&cfg, &teacher, &student, cfg.sample_steps)?;
    let mut dump = BufWriter::new(File::create(out.join("samples.tsv"))?);
    writeln!(dump, "# teacher_x teacher_y student_x student_y")?;
    for (a, b) in t.iter().zip(&s) {
        writeln!(dump, "{} {}\t{} {}", a[0], a[1], b[0], b[1])?;
    }
    dump.flush()?;
    let sw = evalkit::sliced_wasserstein(&s, &t, cfg.eval_projections, stream_seed(cfg.seed, stream::EVAL))?;
    write_json(&out.join("summary.json"), &json!({"sliced_wasserstein": sw, "teacher_checksum": checkpoint::checksum(teacher.params())}))?;
    println!("student vs teacher sliced Wasserstein {sw:.4}");
    Ok(())
}

pub fn rlhf(common: &Common, out: &Path, model: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    prepare_dir(&cfg, out)?;
    let (vae, mut dit, stats) = load_model_dir(&cfg, model)?;
    let mut log = JsonLines::create(&out.join("rlhf_log.jsonl"))?;
    let mut log_err = None;
    workflow::run_grpo(&cfg, &vae, &mut dit, &stats, |l| {
        if log_err.is_none() {
            log_err = serde_json::to_value(l).map_err(Error::from).and_then(|v| log.line(v)).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.finish()?;
    save_model_dir(out, &vae, &dit, &stats)?;
    println!("saved policy to {}", out.display());
    Ok(())
}

pub fn promptforge_build(common: &Common, input: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    prepare_dir(&cfg, &parent_dir(out))?;
    let prompts: Vec<String> = match input {
        Some(p) => std::fs::read_to_string(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, stream::SAMPLE));
            (0..cfg.promptforge_count).map(|_| promptforge::sample_fine_caption(&mut rng)).collect()
        }
    };
    let mut w = JsonLines::create(out)?;
    for (i, p) in prompts.iter().enumerate() {
        let t = promptforge::build_triplet(p, stream_seed(cfg.seed, i as u64))?;
        promptforge::verify_triplet(&t)?;
        w.line(serde_json::to_value(&t).map_err(Error::from)?)?;
    }
    w.finish()?;
    println!("wrote {} triplets to {}", prompts.len(), out.display());
    Ok(())
}

fn emit(cfg: &RunConfig, value: f64, out: Option<&Path>) -> CmdResult {
    println!("{value:.6}");
    if let Some(dir) = out {
        prepare_dir(cfg, dir)?;
        std::fs::write(dir.join("value.txt"), format!("{value:.6}\n"))?;
    }
    Ok(())
}

pub fn eval_pair(common: &Common, a: &Path, b: &Path, out: Option<&Path>, ssim: bool) -> CmdResult {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let (x, y) = (evalkit::load_image(a)?, evalkit::load_image(b)?);
    let v = if ssim { evalkit::ssim_signed(&x, &y, 8)? } else { evalkit::psnr(&x, &y, 2.0)? };
    emit(&cfg, v, out)
}

/// Splits each dump row in half: left columns are one sample set, right
/// columns the other. `#` lines are comments.
fn read_dump(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), Error> {
    let text = std::fs::read_to_string(path)?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("{}:{}: `{t}`: {e}", path.display(), i + 1))))
            .collect::<Result<Vec<f64>, Error>>()?;
        if vals.is_empty() || vals.len() % 2 != 0 {
            return Err(Error::Format(format!("{}:{}: expected an even number of columns", path.display(), i + 1)));
        }
        let h = vals.len() / 2;
        x.push(vals[..h].to_vec());
        y.push(vals[h..].to_vec());
    }
    Ok((x, y))
}

pub fn eval_swd(common: &Common, dump: &Path, out: Option<&Path>) -> CmdResult {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let (x, y) = read_dump(dump)?;
    let v = evalkit::sliced_wasserstein(&x, &y, cfg.eval_projections, stream_seed(cfg.seed, stream::EVAL))?;
    emit(&cfg, v, out)
}

pub fn gradcheck(common: &Common, out: Option<&Path>) -> CmdResult {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let mut rows = check_op_suite(cfg.gradcheck_points, cfg.seed, cfg.gradcheck_eps)?;
    let full = mmdit::loss_grad_check(cfg.seed, cfg.gradcheck_eps)?;
    rows.push(("mmdit_loss".to_string(), full.max_rel_err));
    let mut table = String::new();
    for (name, err) in &rows {
        let line = format!("{name}\t{err:.3e}");
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    if let Some(dir) = out {
        prepare_dir(&cfg, dir)?;
        std::fs::write(dir.join("gradcheck.tsv"), table)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|(_, e)| !(*e < cfg.gradcheck_tol)).map(|(n, _)| n.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant { op: "gradcheck", detail: format!("max rel-err >= {} for {}", cfg.gradcheck_tol, failed.join(", ")) })
    }
}
