//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs as a plain binary (no libtest harness) so the report is always
//! printed, including under `cargo test` without `--nocapture`.

use std::process::ExitCode;
use std::rc::Rc;
use std::time::Instant;

use hiergraph::forecaster::{
    forecast_loss, hier_propagate, stack_levels, ForecastError, GruParams, LevelWindow, Model, ModelConfig,
    MuParams, ReadoutParams,
};
use hiergraph::graph::{GraphError, MpParams, PreparedGraph, Scheme};
use hiergraph::hierarchy::{
    aggregate_series, build_c, build_q, connect, reduce, selections_to_text, Hierarchy, SelectionMatrix,
};
use hiergraph::ndiff::{grad_check, softmax_rows, Bound, NdError, ParamStore, Tape, Tensor, Var};
use hiergraph::nn::Linear;
use hiergraph::pipeline::{
    chrono_split, evaluate, persistence_baseline, synth_generate, train, RunConfig, Split, SynthConfig,
};
use hiergraph::reconciler::{composite_loss, reconcile, LossWeights, Projector, ReconcileError, ReconcileMode};
use hiergraph::selector::{mincut_loss, sample_selection, AnnealConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn random_selections(rng: &mut ChaCha8Rng, n: usize, depth: usize) -> Vec<SelectionMatrix> {
    let mut prev = n;
    let mut out = Vec::new();
    for _ in 0..depth {
        let k = rng.random_range(1..=prev.min(8));
        out.push(SelectionMatrix::new((0..prev).map(|_| rng.random_range(0..k)).collect(), k).unwrap());
        prev = k;
    }
    out
}

fn five_node_selections() -> Vec<SelectionMatrix> {
    vec![SelectionMatrix::new(vec![0, 0, 0, 1, 1], 2).unwrap(), SelectionMatrix::total(2)]
}

fn coherency() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=50);
        let depth = rng.random_range(1..=3);
        let h = Hierarchy::new(Tensor::zeros(n, n), random_selections(&mut rng, n, depth)).map_err(fail)?;
        let q = h.constraint_matrix();
        let pr = Projector::new(&q).map_err(fail)?;
        let y_hat = random(&mut rng, h.total_size(), 3, 100.0);
        let y_bar = reconcile(&y_hat, &pr).map_err(fail)?;
        worst = worst.max(q.matmul(&y_bar).max_abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 5.0, format!("max |QY| {worst:.2e} over 20 hierarchies in {secs:.3}s"))
}

/// `min ‖z - y‖² s.t. Qz = 0` via the KKT system `[I Qᵀ; Q 0][z; ν] = [y; 0]`.
fn kkt(q: &Tensor, y: &[f64]) -> Vec<f64> {
    let (a, m) = q.dims();
    let mut k = DMatrix::<f64>::zeros(m + a, m + a);
    for i in 0..m {
        k[(i, i)] = 1.0;
    }
    for r in 0..a {
        for c in 0..m {
            k[(m + r, c)] = q.get(r, c);
            k[(c, m + r)] = q.get(r, c);
        }
    }
    let mut rhs = DVector::<f64>::zeros(m + a);
    for (i, &v) in y.iter().enumerate() {
        rhs[i] = v;
    }
    let sol = k.lu().solve(&rhs).expect("KKT system is nonsingular");
    (0..m).map(|i| sol[i]).collect()
}

fn projector_algebra() -> Outcome {
    let c = Tensor::from_nested(&[
        vec![1.0, 1.0, 1.0, 1.0, 1.0],
        vec![1.0, 1.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 1.0],
    ]);
    if build_c(&five_node_selections()).map_err(fail)? != c {
        return Err("aggregation matrix differs from the printed one".into());
    }
    let q = build_q(&c);
    let pr = Projector::new(&q).map_err(fail)?;
    let p = pr.p();
    let idem = p.matmul(p).sub(p).frobenius();
    let sym = p.sub(&p.transpose()).frobenius();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut cases = vec![vec![16.0, 6.0, 9.0, 1.0, 2.0, 3.0, 4.0, 5.0]];
    cases.extend((0..10).map(|_| random(&mut rng, 8, 1, 10.0).into_data()));
    let mut kkt_err = 0.0f64;
    for y in &cases {
        let y_bar = reconcile(&Tensor::column(y), &pr).map_err(fail)?;
        for (a, b) in y_bar.data().iter().zip(kkt(&q, y)) {
            kkt_err = kkt_err.max((a - b).abs());
        }
    }
    check(
        idem < 1e-8 && sym < 1e-10 && kkt_err < 1e-8,
        format!("|P²-P| {idem:.1e}, |P-Pᵀ| {sym:.1e}, max KKT gap {kkt_err:.1e}"),
    )
}

fn nd<E: std::fmt::Debug>(e: E) -> NdError {
    panic!("non-numeric failure inside a gradient check: {e:?}")
}

fn graph_nd(e: GraphError) -> NdError {
    match e {
        GraphError::Nd(n) => n,
        other => nd(other),
    }
}

fn forecast_nd(e: ForecastError) -> NdError {
    match e {
        ForecastError::At { source, .. } => source,
        ForecastError::Graph(g) => graph_nd(g),
        other => nd(other),
    }
}

fn ring(n: usize) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        a.set(i, (i + 1) % n, 1.0);
        a.set((i + 1) % n, i, 0.5);
    }
    a
}

fn grad_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut results: Vec<(String, f64, f64)> = Vec::new();

    let graph = PreparedGraph::new(&ring(5), 2).map_err(fail)?;
    for scheme in [Scheme::Gconv, Scheme::Diffusion, Scheme::Gated] {
        let mut store = ParamStore::new();
        let mp = MpParams::new(&mut store, "mp", scheme, 3, 2, &mut rng);
        let weights = Rc::new(random(&mut rng, 10, 3, 1.0));
        let mut inputs = vec![random(&mut rng, 10, 3, 1.0)];
        inputs.extend(store.values().iter().cloned());
        let err = grad_check(
            |_, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                mp.apply(&p, v[0], &graph).map_err(graph_nd)?.mul_const(Rc::clone(&weights))?.sum()
            },
            &inputs,
            1e-5,
        )
        .map_err(fail)?;
        results.push((format!("{scheme:?}"), err, 1e-4));
    }

    {
        let mut store = ParamStore::new();
        let gru = GruParams::new(&mut store, "gru", 2, 2, 3, &mut rng);
        let weights = Rc::new(random(&mut rng, 4, 3, 1.0));
        let mut inputs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, 4, 2, 1.0)).collect();
        inputs.extend(store.values().iter().cloned());
        let err = grad_check(
            |_, v| {
                let p = Bound::from_vars(v[4..].to_vec());
                gru.encode(&p, &v[..3], Some(v[3]))?.mul_const(Rc::clone(&weights))?.sum()
            },
            &inputs,
            1e-5,
        )
        .map_err(fail)?;
        results.push(("gru".into(), err, 1e-4));
    }

    {
        let mut store = ParamStore::new();
        let mus: Vec<MuParams> = (0..3)
            .map(|k| MuParams {
                hidden: Linear::new(&mut store, &format!("mu{k}.h"), 6, 4, true, &mut rng),
                out: Linear::new(&mut store, &format!("mu{k}.o"), 4, 2, true, &mut rng),
            })
            .collect();
        let s1 = softmax_rows(&random(&mut rng, 5, 2, 1.0));
        let s2 = SelectionMatrix::total(2).to_dense();
        let weights = Rc::new(random(&mut rng, 8, 2, 1.0));
        let mut inputs = vec![random(&mut rng, 5, 2, 1.0), random(&mut rng, 2, 2, 1.0), random(&mut rng, 1, 2, 1.0), s1];
        inputs.extend(store.values().iter().cloned());
        let err = grad_check(
            |tape, v| {
                let p = Bound::from_vars(v[4..].to_vec());
                let s = [v[3], tape.constant(s2.clone())];
                let s_t = [s[0].transpose()?, s[1].transpose()?];
                let out = hier_propagate(&v[..3], &s, &s_t, |_, x| Ok(x), |k, x| {
                    mus[k].apply(&p, x).map_err(|source| ForecastError::At {
                        level: k,
                        stage: "mu".into(),
                        source,
                    })
                })
                    .map_err(forecast_nd)?;
                stack_levels(&out, &[5, 2, 1])?.mul_const(Rc::clone(&weights))?.sum()
            },
            &inputs,
            1e-5,
        )
        .map_err(fail)?;
        results.push(("inter-level update".into(), err, 1e-4));
    }

    {
        let mut store = ParamStore::new();
        let readout = ReadoutParams {
            hidden: vec![Linear::new(&mut store, "ro.fc", 4, 5, true, &mut rng)],
            out: Linear::new(&mut store, "ro.out", 5, 3, true, &mut rng),
        };
        let weights = Rc::new(random(&mut rng, 6, 3, 1.0));
        let mut inputs = vec![random(&mut rng, 6, 4, 1.0)];
        inputs.extend(store.values().iter().cloned());
        let err = grad_check(
            |_, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                readout.apply(&p, v[0])?.mul_const(Rc::clone(&weights))?.sum()
            },
            &inputs,
            1e-5,
        )
        .map_err(fail)?;
        results.push(("readout".into(), err, 1e-4));
    }

    {
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let mut a = Tensor::zeros(6, 6);
            for i in 0..6 {
                for j in 0..6 {
                    if i != j && rng.random_bool(0.4) {
                        a.set(i, j, rng.random_range(0.1..2.0));
                    }
                }
            }
            let phi = random(&mut rng, 6, 3, 1.0);
            let err = grad_check(|_, v| mincut_loss(v[0].softmax()?, &a).map(|t| t.loss), &[phi], 1e-6)
                .map_err(fail)?;
            worst = worst.max(err);
        }
        results.push(("min-cut".into(), worst, 1e-4));
    }

    {
        let c = build_c(&five_node_selections()).map_err(fail)?;
        let q = build_q(&c);
        let pr = Projector::new(&q).map_err(fail)?;
        let y = random(&mut rng, 16, 3, 2.0);
        let mask = Rc::new(Tensor::from_rows(16, 3, (0..48).map(|i| f64::from(i % 5 != 0)).collect()));
        let mut worst = 0.0f64;
        for (mode, p) in [
            (ReconcileMode::Projection, 1),
            (ReconcileMode::Projection, 2),
            (ReconcileMode::ResidualPenalty, 1),
            (ReconcileMode::ResidualPenalty, 2),
        ] {
            let w = LossWeights {
                mode,
                p,
                ..LossWeights::default()
            };
            let err = grad_check(
                |tape, v| {
                    let yb = pr.apply_var(v[0])?;
                    composite_loss(v[0], Some(yb), tape.constant(y.clone()), &q, &w, Some(&mask)).map_err(
                        |e| match e {
                            ReconcileError::Nd(n) => n,
                            other => nd(other),
                        },
                    )
                },
                &[random(&mut rng, 16, 3, 2.0)],
                1e-6,
            )
            .map_err(fail)?;
            worst = worst.max(err);
        }
        results.push(("composite loss".into(), worst, 1e-4));
    }

    results.push(("end-to-end model".into(), full_model_error(&mut rng)?, 1e-3));

    let ok = results.iter().all(|(_, e, tol)| e < tol);
    let detail = results
        .iter()
        .map(|(name, e, _)| format!("{name} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, format!("max relative error: {detail}"))
}

fn full_model_error(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let cfg = ModelConfig {
        d_h: 4,
        d_e: 2,
        window: 4,
        horizon: 2,
        layers: 2,
        intra_level_base_only: false,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 5, 1, 3, rng).map_err(fail)?;
    let sel = five_node_selections();
    let a0 = ring(5);
    let a1 = connect(&sel[0], &a0).map_err(fail)?;
    let a2 = connect(&sel[1], &a1).map_err(fail)?;
    let graphs = [
        PreparedGraph::new(&a0, 2).map_err(fail)?,
        PreparedGraph::new(&a1, 2).map_err(fail)?,
        PreparedGraph::new(&a2, 2).map_err(fail)?,
    ];
    // Two samples in the batched layout.
    let x0 = random(rng, 10, 4, 1.0);
    let mut levels = vec![x0];
    for s in &sel {
        let prev = levels.last().unwrap();
        let halves: Vec<Tensor> = (0..2)
            .map(|b| {
                let rows = prev.rows() / 2;
                let block = Tensor::from_rows(rows, 4, prev.data()[b * rows * 4..(b + 1) * rows * 4].to_vec());
                reduce(&block, s).unwrap()
            })
            .collect();
        let joined = [halves[0].data(), halves[1].data()].concat();
        levels.push(Tensor::from_rows(2 * s.clusters(), 4, joined));
    }
    let us: Vec<Tensor> = levels.iter().map(|y| random(rng, y.rows(), 4, 1.0)).collect();
    let target = random(rng, 16, 2, 1.0);
    let dense: Vec<Tensor> = sel.iter().map(SelectionMatrix::to_dense).collect();
    grad_check(
        |tape: &Tape, vars: &[Var]| {
            let p = Bound::from_vars(vars.to_vec());
            let inputs: Vec<LevelWindow> = levels
                .iter()
                .zip(&us)
                .map(|(y, u)| LevelWindow {
                    y: tape.constant(y.clone()),
                    u: Some(tape.constant(u.clone())),
                })
                .collect();
            let s: Vec<Var> = dense.iter().map(|d| tape.constant(d.clone())).collect();
            let out = model
                .forward(&p, &inputs, &s, &[Some(&graphs[0]), Some(&graphs[1]), Some(&graphs[2])])
                .map_err(forecast_nd)?;
            forecast_loss(stack_levels(&out, &[5, 2, 1])?, tape.constant(target.clone()), 2, None)
        },
        model.params.values(),
        1e-5,
    )
    .map_err(fail)
}

fn mincut_oracle() -> Outcome {
    let a = Tensor::from_nested(&[
        vec![0.0, 1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.0, 1.0, 0.0],
    ]);
    let tape = Tape::new();
    let s = tape.constant(Tensor::from_nested(&[
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ]));
    let loss = mincut_loss(s, &a).map_err(fail)?.loss.value().item();

    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let n = rng.random_range(3..12);
        let k = rng.random_range(2..5);
        let mut adj = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random_bool(0.5) {
                    adj.set(i, j, rng.random_range(0.0..3.0));
                }
            }
        }
        let tape = Tape::new();
        let soft = softmax_rows(&random(&mut rng, n, k, 3.0));
        let cut = mincut_loss(tape.constant(soft), &adj).map_err(fail)?.cut.value().item();
        lo = lo.min(cut);
        hi = hi.max(cut);
    }
    check(
        (loss + 1.0).abs() < 1e-9 && lo >= -1.0 && hi <= 0.0,
        format!("two-component loss {loss:.12}, cut range over 100 draws [{lo:.4}, {hi:.4}]"),
    )
}

fn gumbel_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let draws = 10_000;
    let (rows, cols) = (5, 4);
    let mut worst = 0.0f64;
    for tau in [1.0, 0.5] {
        let phi = random(&mut rng, rows, cols, 1.5);
        let probs = softmax_rows(&phi.scale(1.0 / tau));
        let mut counts = vec![0usize; rows * cols];
        for _ in 0..draws {
            let s = sample_selection(&phi, tau, &mut rng).map_err(fail)?;
            for (i, &c) in s.hard.assignment().iter().enumerate() {
                counts[i * cols + c] += 1;
            }
        }
        for (k, &count) in counts.iter().enumerate() {
            let p = probs.data()[k];
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            let z = (count as f64 / draws as f64 - p).abs() / sigma;
            worst = worst.max(z);
        }
    }
    check(worst <= 3.0, format!("largest deviation {worst:.2} sigma over 40 frequencies"))
}

fn straight_through() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let phi = random(&mut rng, 6, 3, 1.0);
    let h = random(&mut rng, 6, 2, 1.0);
    let sample = sample_selection(&phi, 0.7, &mut rng).map_err(fail)?;

    let tape = Tape::new();
    let phi_v = tape.param(phi.clone());
    let st = sample.soft(phi_v).and_then(|s| s.straight_through(sample.hard.to_dense())).map_err(fail)?;
    let one_hot = st.value().data().iter().all(|&v| v == 0.0 || v == 1.0)
        && (0..6).all(|i| st.value().row_slice(i).iter().sum::<f64>() == 1.0);
    let pooled = st.transpose().and_then(|s| s.matmul(tape.constant(h.clone()))).map_err(fail)?;
    let loss = pooled.square().and_then(|x| x.sum()).map_err(fail)?;
    let grads = tape.backward(loss).map_err(fail)?;
    let g_st = grads.wrt(phi_v);
    let upstream = grads.wrt(st);

    // The all-soft path driven by the same upstream gradient.
    let tape2 = Tape::new();
    let phi2 = tape2.param(phi);
    let linear = sample
        .soft(phi2)
        .and_then(|s| s.mul(tape2.constant(upstream)))
        .and_then(|x| x.sum())
        .map_err(fail)?;
    let g_soft = tape2.backward(linear).map_err(fail)?.wrt(phi2);
    let identical = g_st.data().iter().zip(g_soft.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        one_hot && identical && g_st.max_abs() > 0.0,
        format!("forward one-hot: {one_hot}, gradients bitwise equal: {identical}"),
    )
}

fn hierarchy_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut bad = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=40);
        let depth = rng.random_range(1..=3);
        let sel = random_selections(&mut rng, n, depth);
        let x = Tensor::from_rows(n, 5, (0..n * 5).map(|_| f64::from(rng.random_range(-1000i32..1000))).collect());
        let c = build_c(&sel).map_err(fail)?;
        let direct = c.matmul(&x);
        // Recursive reduce, stacked top first like the rows of C.
        let mut per_level = Vec::new();
        let mut level = x.clone();
        for s in &sel {
            level = reduce(&level, s).map_err(fail)?;
            per_level.push(level.clone());
        }
        let recursive: Vec<f64> = per_level.iter().rev().flat_map(|t| t.data().to_vec()).collect();
        let h = Hierarchy::new(Tensor::zeros(n, n), sel).map_err(fail)?;
        let stack = aggregate_series(&x, &h).map_err(fail)?;
        let qy = h.constraint_matrix().matmul(&stack.values);
        if direct.data() != recursive.as_slice() || qy.data().iter().any(|&v| v != 0.0) {
            bad += 1;
        }
    }
    check(bad == 0, format!("{bad} of 50 hierarchies disagree"))
}

fn forecast_config(sizes: Vec<usize>, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d_h = 16;
    c.model.d_e = 8;
    c.model.layers = 1;
    c.model.window = 12;
    c.model.horizon = 3;
    c.hierarchy.cluster_sizes = sizes;
    c.train.batch_size = 32;
    c.train.batches_per_epoch = 20;
    c.train.max_epochs = 50;
    c.train.patience = 15;
    c.train.seed = seed;
    c
}

struct RunSummary {
    mae: f64,
    ari: Option<f64>,
    secs: f64,
    epochs: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct SynthStudy {
    persistence: f64,
    hier: Vec<RunSummary>,
    flat: Vec<RunSummary>,
}

fn synth_study() -> Result<SynthStudy, String> {
    let data = synth_generate(&SynthConfig::default()).map_err(fail)?;
    let cfg = forecast_config(Vec::new(), 0);
    let [_, _, test] = chrono_split(data.len(), cfg.data.split, 12, 3).map_err(fail)?;
    let persistence = persistence_baseline(&data, &test, 12, 3, &[]).map_err(fail)?.mae;
    let run = |sizes: Vec<usize>, seed: u64| -> Result<RunSummary, String> {
        let start = Instant::now();
        let out = train(&data, forecast_config(sizes, seed)).map_err(fail)?;
        let secs = start.elapsed().as_secs_f64();
        let report = evaluate(&out.checkpoint, &data, Split::Test).map_err(fail)?;
        Ok(RunSummary {
            mae: report.mae,
            ari: report.ari,
            secs,
            epochs: out.log.len(),
        })
    };
    let mut hier = Vec::new();
    let mut flat = Vec::new();
    for seed in 1..=5 {
        hier.push(run(vec![3, 1], seed)?);
        flat.push(run(Vec::new(), seed)?);
    }
    Ok(SynthStudy { persistence, hier, flat })
}

fn cluster_recovery(study: &SynthStudy) -> Outcome {
    let aris: Vec<f64> = study.hier.iter().map(|r| r.ari.unwrap_or(f64::NAN)).collect();
    let slowest = study.hier.iter().map(|r| r.secs).fold(0.0, f64::max);
    let epochs: Vec<usize> = study.hier.iter().map(|r| r.epochs).collect();
    let med = median(aris.clone());
    check(
        med >= 0.9 && slowest < 300.0,
        format!("median ARI {med:.3} (per seed {aris:.3?}), epochs {epochs:?}, slowest run {slowest:.0}s"),
    )
}

fn forecast_floor(study: &SynthStudy) -> Outcome {
    let maes: Vec<f64> = study.hier.iter().map(|r| r.mae).collect();
    let med = median(maes.clone());
    let worst = maes.iter().copied().fold(0.0, f64::max);
    check(
        med <= 0.8 * study.persistence,
        format!(
            "median test MAE {med:.4} (worst {worst:.4}) vs persistence {:.4}, ratio {:.3}",
            study.persistence,
            med / study.persistence
        ),
    )
}

fn hierarchy_bias(study: &SynthStudy) -> Outcome {
    let hier = median(study.hier.iter().map(|r| r.mae).collect());
    let flat = median(study.flat.iter().map(|r| r.mae).collect());
    check(
        hier <= 1.05 * flat,
        format!("median test MAE two-level {hier:.4} vs flat {flat:.4}, ratio {:.4}", hier / flat),
    )
}

fn reproducibility() -> Outcome {
    let data = synth_generate(&SynthConfig {
        length: 400,
        seed: 9,
        ..SynthConfig::default()
    })
    .map_err(fail)?;
    let mut cfg = forecast_config(vec![3, 1], 11);
    cfg.model.d_h = 8;
    cfg.model.d_e = 4;
    cfg.train.max_epochs = 4;
    cfg.train.batches_per_epoch = 5;
    let a = train(&data, cfg.clone()).map_err(fail)?;
    let b = train(&data, cfg).map_err(fail)?;
    let gap = a
        .log
        .iter()
        .zip(&b.log)
        .map(|(x, y)| (x.train_loss - y.train_loss).abs().max((x.mincut_loss - y.mincut_loss).abs()))
        .fold(0.0, f64::max);
    let clusters_a = selections_to_text(&a.checkpoint.selector.argmax_selections());
    let clusters_b = selections_to_text(&b.checkpoint.selector.argmax_selections());
    check(
        a.log.len() == b.log.len() && gap <= 1e-10 && clusters_a == clusters_b,
        format!(
            "{} epochs, max loss gap {gap:.1e}, cluster exports identical: {}",
            a.log.len(),
            clusters_a == clusters_b
        ),
    )
}

fn schedule() -> Outcome {
    let data = synth_generate(&SynthConfig {
        length: 300,
        seed: 10,
        ..SynthConfig::default()
    })
    .map_err(fail)?;
    let mut cfg = forecast_config(vec![3, 1], 12);
    cfg.model.d_h = 4;
    cfg.model.d_e = 2;
    cfg.train.max_epochs = 51;
    cfg.train.batches_per_epoch = 1;
    cfg.train.batch_size = 2;
    cfg.train.patience = 1000;
    cfg.selector = AnnealConfig {
        tau0: 1.0,
        rate: 0.9,
        floor: 0.05,
    };
    let out = train(&data, cfg).map_err(fail)?;
    let lrs: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
    let taus: Vec<f64> = out.log.iter().map(|r| r.tau).collect();
    let lr_ok = lrs.len() == 51 && lrs[..50].iter().all(|&l| l == 0.003) && (lrs[50] - 0.00075).abs() < 1e-15;
    let tau_ok = taus[0] == 1.0 && taus.windows(2).all(|w| w[1] <= w[0]) && *taus.last().unwrap() == 0.05;
    check(
        lr_ok && tau_ok,
        format!(
            "lr epoch 49 {} -> epoch 50 {}, tau {} -> {} monotone: {}",
            lrs[49],
            lrs[50],
            taus[0],
            taus.last().unwrap(),
            taus.windows(2).all(|w| w[1] <= w[0])
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, outcome: Outcome, secs: f64| {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{status}] {id:>2} {name}: {detail} ({secs:.1}s)");
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        (outcome, start.elapsed().as_secs_f64())
    };

    let (o, s) = timed(&coherency);
    report(1, "coherency", o, s);
    let (o, s) = timed(&projector_algebra);
    report(2, "projector algebra", o, s);
    let (o, s) = timed(&grad_suite);
    report(3, "gradient suite", o, s);
    let (o, s) = timed(&mincut_oracle);
    report(4, "min-cut oracle", o, s);
    let (o, s) = timed(&gumbel_fidelity);
    report(5, "Gumbel fidelity", o, s);
    let (o, s) = timed(&straight_through);
    report(6, "straight-through contract", o, s);

    let start = Instant::now();
    let study = synth_study();
    let secs = start.elapsed().as_secs_f64();
    match &study {
        Ok(st) => {
            report(7, "cluster recovery", cluster_recovery(st), secs);
            report(8, "forecast quality floor", forecast_floor(st), 0.0);
            report(9, "hierarchy does not hurt", hierarchy_bias(st), 0.0);
        }
        Err(e) => {
            for (id, name) in [(7, "cluster recovery"), (8, "forecast quality floor"), (9, "hierarchy does not hurt")] {
                report(id, name, Err(format!("training failed: {e}")), secs);
            }
        }
    }

    let (o, s) = timed(&hierarchy_algebra);
    report(10, "hierarchy algebra", o, s);
    let (o, s) = timed(&reproducibility);
    report(11, "reproducibility", o, s);
    let (o, s) = timed(&schedule);
    report(12, "lr and temperature schedule", o, s);

    println!("acceptance: {} of 12 criteria passed", 12 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
