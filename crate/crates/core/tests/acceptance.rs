//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use indexmap::IndexMap;
use man_core::checkpoint;
use man_core::data::MultimodalExample;
use man_core::datagen::{self, GenConfig, LabelSpec, DEFAULT_SPLIT};
use man_core::dataio::{self, ExperimentConfig, LoadOptions};
use man_core::fusion::{
    build_variant, man_gradient_check, AttentionBlock, EmbeddingStack, Fusion, ManModel,
    ModalityDims, Variant,
};
use man_core::harness::{self, LoadedData, RunOptions, RunResult, GRADCHECK_TOLERANCE};
use man_core::layers::{self, Linear, LstmCell, ModalitySequence, Parameterized, SubNetwork, Task};
use man_core::tensor::{gradcheck, Graph, Tensor};
use man_core::training::{accuracy, mae, run_pipeline, TrainConfig, TrainedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// ---------------------------------------------------------------------------
// Shared experiment runs

/// Generates a preset's data into a scratch directory and trains variants on
/// it, caching results so several criteria can share one set of runs.
struct Experiment {
    cfg: ExperimentConfig,
    data: LoadedData,
    runs: HashMap<String, Vec<RunResult>>,
    _dir: tempfile::TempDir,
}

impl Experiment {
    fn new(config: &str) -> Experiment {
        let dir = tempfile::tempdir().unwrap();
        let opts = LoadOptions {
            permissive: false,
            check_files: false,
        };
        let mut cfg = dataio::load_config_with(configs_dir().join(config), opts).unwrap();
        cfg.data.train = dir.path().join("train.jsonl");
        cfg.data.val = dir.path().join("val.jsonl");
        cfg.data.test = dir.path().join("test.jsonl");
        cfg.output_dir = dir.path().join("runs");
        cfg.seeds = SEEDS.to_vec();
        harness::cmd_gen(&cfg).unwrap();
        let data = harness::load_data(&cfg).unwrap();
        Experiment {
            cfg,
            data,
            runs: HashMap::new(),
            _dir: dir,
        }
    }

    fn results(&mut self, variant: &str) -> &[RunResult] {
        if !self.runs.contains_key(variant) {
            let mut cfg = self.cfg.clone();
            cfg.variant = variant.parse().unwrap();
            let summary = harness::run_loaded(&cfg, &self.data, RunOptions { jobs: 1 }).unwrap();
            let results: Vec<RunResult> = summary.results().cloned().collect();
            assert_eq!(results.len(), SEEDS.len(), "{variant}: a seed diverged");
            self.runs.insert(variant.to_string(), results);
        }
        &self.runs[variant]
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(xs: impl Iterator<Item = f64>) -> String {
    let v: Vec<String> = xs.map(|x| format!("{x:.3}")).collect();
    format!("[{}]", v.join(" "))
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity

fn gradient_fidelity() -> Verdict {
    let t0 = Instant::now();
    let ops = gradcheck::op_suite(0, 1e-5);
    let (worst_op, op_err) = ops
        .iter()
        .cloned()
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let man = man_gradient_check(0, 1e-5).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let max = op_err.max(man);
    verdict(
        max < GRADCHECK_TOLERANCE && secs < 60.0,
        format!(
            "{} ops, worst {worst_op} {op_err:.2e}; man_forward+loss {man:.2e}; {secs:.2}s",
            ops.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. attention normalisation

fn attention_normalisation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum = 0.0f64;
    let mut failures = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=6);
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=6);
        let mut uniform = |r: usize, c: usize| {
            let scale = rng.random_range(0.1..3.0);
            let data = (0..r * c)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            Tensor::new(vec![r, c], data).unwrap()
        };
        let att =
            AttentionBlock::from_parts(uniform(k, n), uniform(k, 1), uniform(1, k), 0.3).unwrap();
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let stack = EmbeddingStack::new((0..m).map(|i| format!("m{i}")).collect(), rows).unwrap();
        let logits = att.logits(&stack).unwrap();
        let w = att.weights(&stack).unwrap();
        worst_sum = worst_sum.max((w.weights.iter().sum::<f64>() - 1.0).abs());
        let in_range = w.weights.iter().all(|&x| x > 0.0 && x < 1.0) || m == 1;
        let top_logit = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        if !in_range || w.argmax() != top_logit {
            failures += 1;
        }
    }
    verdict(
        worst_sum < 1e-9 && failures == 0,
        format!("1000 draws, max |sum-1| {worst_sum:.1e}, {failures} range/argmax failures"),
    )
}

// ---------------------------------------------------------------------------
// 3. fast modality dominates scratch attention

fn fast_slow_attention(fs: &mut Experiment) -> Verdict {
    let t0 = Instant::now();
    let gap = |r: &RunResult| {
        let w = r.best_attention.as_ref().unwrap();
        w[0] - w[1]
    };
    let scratch: Vec<f64> = fs.results("man-no-pretraining").iter().map(gap).collect();
    let pre: Vec<f64> = fs.results("man").iter().map(gap).collect();
    let secs = t0.elapsed().as_secs_f64();
    let dominant = scratch.iter().filter(|&&g| g >= 0.15).count();
    let closer = pre
        .iter()
        .zip(&scratch)
        .filter(|(p, s)| p.abs() < s.abs())
        .count();
    verdict(
        dominant >= 4 && closer >= 4 && secs < 15.0 * 60.0,
        format!(
            "scratch w_fast-w_slow {} ({dominant}/5 >= 0.15); pre-trained {} ({closer}/5 smaller); {secs:.0}s",
            fmt_list(scratch.iter().copied()),
            fmt_list(pre.iter().copied()),
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. pre-training does not hurt

fn pretraining_direction(fs: &mut Experiment) -> Verdict {
    let acc = |fs: &mut Experiment, v: &str| -> Vec<f64> {
        fs.results(v).iter().map(|r| r.test_accuracy).collect()
    };
    let pairs = [
        ("man", "man-no-pretraining"),
        ("man-no-attention", "lf-lstm"),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (pre, scratch) in pairs {
        let (a, b) = (acc(fs, pre), acc(fs, scratch));
        let wins = a.iter().zip(&b).filter(|(x, y)| x >= y).count();
        pass &= wins >= 4;
        parts.push(format!(
            "{pre} {} vs {scratch} {} ({wins}/5)",
            fmt_list(a.iter().copied()),
            fmt_list(b.iter().copied())
        ));
    }
    verdict(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 5. ablation ordering

fn ablation_ordering(dom: &mut Experiment) -> Verdict {
    let mut acc = |v: &str| mean(dom.results(v).iter().map(|r| r.test_accuracy));
    let man = acc("man");
    let no_att = acc("man-no-attention");
    let no_pre = acc("man-no-pretraining");
    let strict = if man > no_att && man > no_pre {
        "strict"
    } else {
        "non-strict"
    };
    verdict(
        man >= no_att && man >= no_pre,
        format!("mean test accuracy man {man:.4}, man-no-attention {no_att:.4}, man-no-pretraining {no_pre:.4} ({strict})"),
    )
}

// ---------------------------------------------------------------------------
// 6. attention picks the informative modality

fn interpretability(dom: &mut Experiment) -> Verdict {
    let agree: Vec<f64> = dom
        .results("man")
        .iter()
        .map(|r| r.attention_agreement.unwrap())
        .collect();
    let ok = agree.iter().filter(|&&a| a >= 0.7).count();
    verdict(
        ok >= 4,
        format!(
            "argmax agreement on singleton examples {} ({ok}/5 >= 0.70)",
            fmt_list(agree.iter().copied())
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. oracle equivalence

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 1x1 cell from eight weights (`W_i*` then `W_h*`, gate order i f g o) and four biases.
fn scalar_cell(w: [f64; 8], b: [f64; 4]) -> LstmCell<f64> {
    let mut cell = LstmCell::zeroed(1, 1);
    let mut k = 0;
    cell.visit_params_mut(&mut |_, t| {
        t.data_mut()[0] = if k < 8 { w[k] } else { b[k - 8] };
        k += 1;
    });
    cell
}

fn scalar_step(w: [f64; 8], b: [f64; 4], x: f64, h: f64, c: f64) -> (f64, f64) {
    let i = sig(w[0] * x + w[4] * h + b[0]);
    let f = sig(w[1] * x + w[5] * h + b[1]);
    let g = (w[2] * x + w[6] * h + b[2]).tanh();
    let o = sig(w[3] * x + w[7] * h + b[3]);
    let c2 = f * c + i * g;
    (o * c2.tanh(), c2)
}

/// Runs the library's `lstm_step` op once on scalars.
fn graph_step(cell: &LstmCell<f64>, x: f64, h: f64, c: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let vars = cell.bind(&mut g);
    let x = g.constant(Tensor::column(vec![x]));
    let h = g.constant(Tensor::column(vec![h]));
    let c = g.constant(Tensor::column(vec![c]));
    let (h2, c2) = layers::lstm_step(&mut g, &vars, x, h, c).unwrap();
    (g.value(h2).data()[0], g.value(c2).data()[0])
}

fn oracle_equivalence() -> Verdict {
    // bilstm on T=2 against unrolled lstm_step calls
    let (wf, bf) = (
        [0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.6],
        [0.1, 1.0, -0.1, 0.05],
    );
    let (wb, bb) = (
        [-0.6, 0.4, 0.3, -0.2, 0.1, 0.25, -0.5, 0.35],
        [0.0, 1.0, 0.2, -0.3],
    );
    let (fwd, bwd) = (scalar_cell(wf, bf), scalar_cell(wb, bb));
    let net = SubNetwork {
        modality: "m".into(),
        forward_cell: fwd.clone(),
        backward_cell: bwd.clone(),
        head: None,
    };
    let xs = [0.8, -1.1];
    let emb = net
        .encode(&ModalitySequence::new("m", 2, 1, xs.to_vec()).unwrap())
        .unwrap();
    let (h1, c1) = graph_step(&fwd, xs[0], 0.0, 0.0);
    let (h2, _) = graph_step(&fwd, xs[1], h1, c1);
    let (k1, d1) = graph_step(&bwd, xs[1], 0.0, 0.0);
    let (k2, _) = graph_step(&bwd, xs[0], k1, d1);
    let bilstm_err = (emb[0] - h2).abs().max((emb[1] - k2).abs());

    // man_forward on m=2, hidden 1, T=1 against a scalar composition
    let cells = [
        (
            [0.5, -0.3, 0.8, 0.2, 0.1, 0.4, -0.6, 0.3],
            [0.05, 1.0, -0.1, 0.2],
        ),
        (
            [-0.4, 0.6, 0.3, -0.7, 0.2, -0.1, 0.5, 0.4],
            [0.0, 1.0, 0.3, -0.2],
        ),
        (
            [0.9, 0.1, -0.5, 0.6, -0.3, 0.2, 0.4, -0.8],
            [0.1, 1.0, 0.0, 0.15],
        ),
        (
            [0.2, -0.9, 0.7, 0.1, 0.5, 0.3, -0.2, 0.6],
            [-0.05, 1.0, 0.25, 0.0],
        ),
    ];
    let w1 = [0.3, -0.2, 0.5, 0.4, -0.6, 0.1];
    let b1 = [0.1, -0.1, 0.05];
    let w2 = [0.7, -0.4, 0.9];
    let b2 = 0.2;
    let hw = [0.2, -0.3, 0.5, 0.1, -0.4, 0.6, 0.3, -0.2];
    let hb = [0.05, -0.05];
    let inputs = [("a", 0.7), ("b", -1.3)];
    let subs = inputs
        .iter()
        .enumerate()
        .map(|(i, (name, _))| SubNetwork {
            modality: name.to_string(),
            forward_cell: scalar_cell(cells[2 * i].0, cells[2 * i].1),
            backward_cell: scalar_cell(cells[2 * i + 1].0, cells[2 * i + 1].1),
            head: None,
        })
        .collect();
    let att = AttentionBlock::from_parts(
        Tensor::matrix(3, 2, w1.to_vec()).unwrap(),
        Tensor::column(b1.to_vec()),
        Tensor::matrix(1, 3, w2.to_vec()).unwrap(),
        b2,
    )
    .unwrap();
    let head = Linear::from_parts(
        Tensor::matrix(2, 4, hw.to_vec()).unwrap(),
        Tensor::column(hb.to_vec()),
    )
    .unwrap();
    let model = ManModel::new(
        subs,
        Fusion::Attention(att),
        head,
        Task::Classification { classes: 2 },
    )
    .unwrap();
    let example = MultimodalExample {
        id: "toy".into(),
        label: 0.0,
        modalities: inputs
            .iter()
            .map(|&(name, x)| {
                (
                    name.to_string(),
                    ModalitySequence::new(name, 1, 1, vec![x]).unwrap(),
                )
            })
            .collect::<IndexMap<_, _>>(),
        informative_set: None,
    };
    let h: Vec<[f64; 2]> = inputs
        .iter()
        .enumerate()
        .map(|(i, &(_, x))| {
            let (f, b) = (cells[2 * i], cells[2 * i + 1]);
            [
                scalar_step(f.0, f.1, x, 0.0, 0.0).0,
                scalar_step(b.0, b.1, x, 0.0, 0.0).0,
            ]
        })
        .collect();
    let logit = |hv: [f64; 2]| {
        b2 + (0..3)
            .map(|r| w2[r] * (w1[2 * r] * hv[0] + w1[2 * r + 1] * hv[1] + b1[r]).tanh())
            .sum::<f64>()
    };
    let (la, lb) = (logit(h[0]), logit(h[1]));
    let wa = la.exp() / (la.exp() + lb.exp());
    let wb = 1.0 - wa;
    let fused = [wa * h[0][0], wa * h[0][1], wb * h[1][0], wb * h[1][1]];
    let out: Vec<f64> = (0..2)
        .map(|r| hb[r] + (0..4).map(|c| hw[r * 4 + c] * fused[c]).sum::<f64>())
        .collect();
    let p = model.predict(&example).unwrap();
    let w = p.weights.unwrap().weights;
    let man_err = [
        w[0] - wa,
        w[1] - wb,
        p.output[0] - out[0],
        p.output[1] - out[1],
    ]
    .iter()
    .fold(0.0f64, |m, d| m.max(d.abs()));
    verdict(
        man_err < 1e-10 && bilstm_err < 1e-12,
        format!("man_forward max diff {man_err:.1e} (< 1e-10); bilstm {bilstm_err:.1e} (< 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// 8. determinism and round trips

fn determinism() -> Verdict {
    let gen = GenConfig {
        specs: datagen::fast_slow(),
        n_examples: 120,
        labels: LabelSpec::Classification { classes: 2 },
        seed: 8,
        split: DEFAULT_SPLIT,
    };
    let splits = datagen::generate(&gen).unwrap();
    let dims: Vec<ModalityDims> = gen
        .specs
        .iter()
        .map(|s| ModalityDims {
            name: s.name.clone(),
            input_dim: s.feature_dim,
            hidden_dim: 3,
        })
        .collect();
    let task = Task::Classification { classes: 2 };
    let cfg = TrainConfig {
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let plan = build_variant(&dims, None, task, &Variant::Man).unwrap();
    let run =
        || run_pipeline(&plan, &splits.train.examples, &splits.val.examples, &cfg, 5).unwrap();
    let (a, b) = (run(), run());
    let modalities = a.model.modality_order();
    let csv_equal = harness::epoch_csv(&a.records, Some(&modalities))
        == harness::epoch_csv(&b.records, Some(&modalities));

    let dir = tempfile::tempdir().unwrap();
    let (f1, f2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    dataio::write_dataset(&splits.train, &f1).unwrap();
    let (back, _) = dataio::read_dataset(&f1).unwrap();
    dataio::write_dataset(&back, &f2).unwrap();
    let dataset_equal = std::fs::read(&f1).unwrap() == std::fs::read(&f2).unwrap();

    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&ckpt, &plan, &a.model).unwrap();
    let (_, reloaded) = checkpoint::load(&ckpt).unwrap();
    let flat = |m: &TrainedModel| match m {
        TrainedModel::Fused(m) => m.flat_params(),
        TrainedModel::Unimodal(n) => n.flat_params(),
    };
    let (p, q) = (flat(&a.model), flat(&reloaded));
    let params_equal =
        p.len() == q.len() && p.iter().zip(&q).all(|(x, y)| x.to_bits() == y.to_bits());
    verdict(
        csv_equal && dataset_equal && params_equal,
        format!(
            "epoch CSV rerun identical {csv_equal}; dataset write-read-write identical {dataset_equal}; checkpoint bit-identical {params_equal} ({} params)",
            p.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. metrics

fn metrics() -> Verdict {
    let a3 = accuracy(&[1, 0, 2], &[1, 1, 2]);
    let m = mae(&[0.5, -1.0], &[1.0, -2.0]);
    verdict(
        a3 == 2.0 / 3.0 && m == 0.75,
        format!("accuracy fixture {a3} (2/3), MAE fixture {m} (0.75)"),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let names = [
        "gradient fidelity",
        "attention normalisation",
        "fast modality dominates scratch attention",
        "pre-training does not hurt accuracy",
        "ablation ordering",
        "interpretability",
        "oracle equivalence",
        "determinism and round trips",
        "metric fixtures",
    ];
    let mut fast_slow: Option<Experiment> = None;
    let mut dominant: Option<Experiment> = None;
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !selected(n) {
            continue;
        }
        let t0 = Instant::now();
        let v = match n {
            1 => gradient_fidelity(),
            2 => attention_normalisation(),
            3 => fast_slow_attention(
                fast_slow.get_or_insert_with(|| Experiment::new("fast_slow.toml")),
            ),
            4 => pretraining_direction(
                fast_slow.get_or_insert_with(|| Experiment::new("fast_slow.toml")),
            ),
            5 => {
                ablation_ordering(dominant.get_or_insert_with(|| Experiment::new("dominant.toml")))
            }
            6 => interpretability(dominant.get_or_insert_with(|| Experiment::new("dominant.toml"))),
            7 => oracle_equivalence(),
            8 => determinism(),
            _ => metrics(),
        };
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n} ({name}): {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
