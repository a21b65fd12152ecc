use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use lipforge_core::layers::manifest::{load_network, save_network, ScaleRecord};
use lipforge_core::scaling::{
    aol_diag, gamma_variant, ortho_distance, sll_diag, t_aol, t_opt_heuristic, t_sll, t_sn, QVector, ScalingVector,
    SN_MAX_ITER, SN_TOL,
};
use lipforge_core::tensor::{gram, read_matrix, read_vector, spectral_norm, write_matrix, DenseMatrix};
use lipforge_core::trainer::{history_csv, make_two_moons, train as fit, SllModel, TrainConfig};
use lipforge_core::verify::{certify_dataset, lipschitz_report, soundness_check, PgdConfig};
use lipforge_core::LipError;

use crate::MethodArg;

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    read_matrix(path).with_context(|| format!("reading {}", path.display()))
}

pub fn scale(method: MethodArg, weights: &Path, q: Option<&Path>, iters: usize, seed: u64) -> Result<()> {
    let w = load_matrix(weights)?;
    let record = |t: ScalingVector| ScaleRecord { diag: t.diag, margin: t.feasibility_margin, tolerance: t.tolerance };
    let out = match method {
        MethodArg::Sn => record(t_sn(&w)?),
        MethodArg::Aol => record(t_aol(&w)?),
        MethodArg::Sll => {
            let q = match q {
                Some(p) => QVector::new(read_vector(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => QVector::ones(w.cols()),
            };
            record(t_sll(&w, &q)?)
        }
        MethodArg::Opt => record(t_opt_heuristic(&w, iters, seed)?),
        MethodArg::Gamma => {
            let g = gamma_variant(&w)?;
            ScaleRecord { diag: g.diag, margin: g.margin, tolerance: g.tolerance }
        }
    };
    emit(&out)
}

#[derive(Serialize)]
struct LayerReport {
    layer: usize,
    form: &'static str,
    method: Option<&'static str>,
    /// Scaling margin, or the LMI margin for general layers.
    margin: f64,
    tolerance: f64,
    certified: bool,
    ortho_trace: Option<f64>,
    ortho_frobenius: Option<f64>,
}

pub fn verify(model: &Path, pairs: usize, seed: u64) -> Result<()> {
    let net = load_network(model).with_context(|| format!("loading {}", model.display()))?;
    let mut layers = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let cert = layer.certificate(i);
        let (mut ortho_trace, mut ortho_frobenius) = (None, None);
        if let (Some(t), true) = (layer.scaling(), cert.certified) {
            let (tr, fro) = ortho_distance(layer.weights(), t)?;
            ortho_trace = Some(tr);
            ortho_frobenius = Some(fro);
        }
        layers.push(LayerReport {
            layer: i,
            form: cert.form,
            method: layer.scaling().map(|t| t.method.as_str()),
            margin: cert.margin,
            tolerance: cert.tolerance,
            certified: cert.certified,
            ortho_trace,
            ortho_frobenius,
        });
    }
    let failed: Vec<&LayerReport> = layers.iter().filter(|l| !l.certified).collect();
    if let Some(first) = failed.first() {
        for l in &failed {
            eprintln!("layer {} ({}): margin {:e} below -{:e}", l.layer, l.form, l.margin, l.tolerance);
        }
        let names: Vec<String> = failed.iter().map(|l| l.layer.to_string()).collect();
        return Err(anyhow::Error::new(LipError::Certificate { layer: first.layer }))
            .context(format!("infeasible layers: {}", names.join(", ")));
    }
    let lipschitz = lipschitz_report(&net, pairs, seed)?;
    emit(&json!({ "layers": layers, "lipschitz": lipschitz }))
}

pub fn train(config: Option<&Path>, data: &str, out: &Path, samples: usize, noise: f64) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if data != "two-moons" {
        bail!("unknown dataset {data:?}; only two-moons is available");
    }
    let dataset = make_two_moons(samples, noise, cfg.seed)?;
    let model = SllModel::init(dataset.input_dim(), dataset.num_classes, &cfg.model, cfg.seed)?;
    let outcome = fit(model, &dataset, &cfg)?;

    let manifest = save_network(&outcome.network, out)?;
    let history_path = out.join("history.csv");
    fs::write(&history_path, history_csv(&outcome.history, cfg.history_radius))?;
    let test_dir = out.join("test");
    fs::create_dir_all(&test_dir)?;
    let (x, y) = dataset.test();
    write_matrix(test_dir.join("inputs.mtx.txt"), &x)?;
    fs::write(test_dir.join("labels.txt"), y.iter().map(|l| format!("{l}\n")).collect::<String>())?;

    let last = outcome.history.last().expect("at least one epoch");
    let ortho: Vec<_> = outcome
        .model
        .ortho_comparison()?
        .into_iter()
        .enumerate()
        .map(|(i, (trained, unit))| json!({ "layer": i, "trained_q": trained, "unit_q": unit }))
        .collect();
    emit(&json!({
        "manifest": manifest,
        "history": history_path,
        "test_data": test_dir,
        "epochs": last.epoch,
        "loss": last.loss,
        "nat_acc": last.nat_acc,
        "cert_acc": last.cert_acc,
        "cert_radius": cfg.history_radius,
        "ortho_frobenius": ortho,
    }))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let label = line.parse().map_err(|_| LipError::Parse { line: i + 1, message: format!("bad label {line:?}") });
        labels.push(label.with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(labels)
}

pub fn certify(
    model: &Path,
    data: &Path,
    radii: &[f64],
    out: Option<&Path>,
    pgd: Option<PgdConfig>,
    seed: u64,
) -> Result<()> {
    if radii.iter().any(|r| !(*r >= 0.0)) {
        bail!("radii must be non-negative");
    }
    let net = load_network(model).with_context(|| format!("loading {}", model.display()))?;
    let inputs = load_matrix(&data.join("inputs.mtx.txt"))?;
    let labels = read_labels(&data.join("labels.txt"))?;
    let report = certify_dataset(&net, &inputs, &labels, radii)?;
    let soundness = match pgd {
        Some(cfg) => Some(soundness_check(&net, &inputs, &labels, radii, &cfg, seed)?),
        None => None,
    };
    let mut summary = json!({
        "natural_accuracy": report.natural_accuracy(),
        "radii_grid": report.radii_grid,
        "certified_accuracy": report.certified_accuracy,
    });
    if let Some(s) = &soundness {
        summary["soundness"] = serde_json::to_value(s)?;
    }
    match out {
        Some(path) => {
            fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
            summary["report"] = json!(path);
            emit(&summary)?;
        }
        None => emit(&report)?,
    }
    if let Some(bad) = soundness.iter().flatten().find(|e| e.violations > 0) {
        bail!("{} certified samples were attacked successfully at radius {}", bad.violations, bad.radius);
    }
    Ok(())
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn bench(sizes: &[usize], reps: usize, seed: u64) -> Result<()> {
    if reps == 0 || sizes.contains(&0) {
        bail!("sizes and reps must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for &n in sizes {
        let w = DenseMatrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut times: [Vec<u128>; 3] = Default::default();
        for _ in 0..reps {
            let start = Instant::now();
            let sigma = spectral_norm(&w, SN_TOL, SN_MAX_ITER)?;
            std::hint::black_box(vec![sigma * sigma; n]);
            times[0].push(start.elapsed().as_nanos().max(1));

            let start = Instant::now();
            std::hint::black_box(aol_diag(&gram(&w)));
            times[1].push(start.elapsed().as_nanos().max(1));

            let start = Instant::now();
            std::hint::black_box(sll_diag(&gram(&w), &q));
            times[2].push(start.elapsed().as_nanos().max(1));
        }
        for (method, t) in ["sn", "aol", "sll"].iter().zip(times) {
            entries.push(json!({ "method": method, "size": n, "reps": reps, "median_ns": median(t) }));
        }
    }
    emit(&entries)
}
