//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed. Runs on a single rayon thread.

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hhgr::augment::{coarse_drop, fine_drop};
use hhgr::config::RunConfig;
use hhgr::data::{
    generate_synthetic, split_groups, Holdout, InteractionDataset, SplitDataset, SplitRatios, SubjectKind,
    SynthConfig, TripleSampler,
};
use hhgr::eval::{evaluate, ndcg_at_k, recall_at_k, training_fit, EvalOptions, RankedList, RecallDenominator};
use hhgr::hypergraph::{motif_adjacency, propagation_operator, Adjacency, IncidenceMatrix};
use hhgr::model::{
    save_checkpoint, CheckpointMeta, ForwardState, Mode, ModelDims, ModelParams, Structure, TensorKind, Views,
};
use hhgr::sparse::SparseBinary;
use hhgr::train::{objective, sample_contrast_negatives, train, Batch, ContrastBatch, Stage};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    if took > limit {
        Err(format!("took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

fn base_config(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str("[data.synthetic]\n").expect("static config");
    cfg.model.mode = mode;
    cfg.train.patience = 0;
    cfg
}

fn motif_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut entries = 0usize;
    for case in 0..200 {
        let n = rng.gen_range(1..=50);
        let p = rng.gen_range(0.1..=0.5);
        let mut dense = vec![vec![false; n]; n];
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    dense[i][j] = true;
                    dense[j][i] = true;
                    edges.push((i, j));
                }
            }
        }
        let t = motif_adjacency(&Adjacency::from_edges(n, edges).map_err(|e| e.to_string())?);
        for i in 0..n {
            let mut row_sum = 0;
            for j in 0..n {
                let mut triangles = 0u64;
                if dense[i][j] {
                    for k in 0..n {
                        if dense[i][k] && dense[k][j] {
                            triangles += 1;
                        }
                    }
                }
                if t.get(i, j) != triangles {
                    return Err(format!("graph {case}: T[{i},{j}] = {}, brute force {triangles}", t.get(i, j)));
                }
                row_sum += triangles;
            }
            if t.degree()[i] != row_sum {
                return Err(format!("graph {case}: degree {i} = {}, expected {row_sum}", t.degree()[i]));
            }
        }
        entries += t.entries().len();
    }
    within(Duration::from_secs(5), started)?;
    Ok(format!("200 graphs, {entries} nonzero entries matched"))
}

fn propagation_stochasticity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut worst, mut isolated) = (0.0f64, 0usize);
    for case in 0..200 {
        let m = rng.gen_range(1..=50);
        let n = rng.gen_range(1..=20);
        let mut pairs = Vec::new();
        for e in 0..n {
            let size = rng.gen_range(1..=m.min(6));
            for v in rand::seq::index::sample(&mut rng, m, size) {
                pairs.push((v, e));
            }
        }
        let h = IncidenceMatrix::new(m, n, pairs).map_err(|e| e.to_string())?;
        let op = propagation_operator(&h);
        for v in 0..m {
            let sum = op.matrix().row_sum(v);
            if h.edges_of(v).is_empty() {
                isolated += 1;
                if op.matrix().row(v).any(|(_, x)| x != 0.0) {
                    return Err(format!("hypergraph {case}: isolated row {v} is not zero"));
                }
            } else {
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    check(
        worst <= 1e-9,
        format!("200 hypergraphs, max |row sum - 1| = {worst:.1e}, {isolated} isolated rows exactly zero"),
    )
}

fn gradient_instance() -> InteractionDataset {
    let ui: Vec<(usize, usize)> = (0..8).flat_map(|u| (0..3).map(move |k| (u, (u * 3 + k * 2) % 10))).collect();
    let gi = vec![(0, 0), (0, 3), (0, 5), (1, 1), (1, 4), (1, 8), (2, 2), (2, 6), (2, 9)];
    let membership = vec![vec![0, 1, 2], vec![2, 3, 4], vec![4, 5, 0]];
    InteractionDataset::new(
        SparseBinary::from_pairs(8, 10, ui).expect("fixed"),
        SparseBinary::from_pairs(3, 10, gi).expect("fixed"),
        membership,
    )
    .expect("fixed")
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let ds = gradient_instance();
    let s = Structure::from_dataset(&ds).map_err(|e| e.to_string())?;
    if s.motif.is_zero() {
        return Err("instance has an all-zero motif".into());
    }
    let dims = ModelDims { users: 8, items: 10, groups: 3, dim: 4, user_layers: 2, group_layers: 1 };
    let params = ModelParams::init(dims, 5).map_err(|e| e.to_string())?;
    let (views, _) = Views::draw(&s, 0.2, 0.3, 9).map_err(|e| e.to_string())?;
    let ui = TripleSampler::new(ds.user_item(), SubjectKind::User, 2, 1).map_err(|e| e.to_string())?.epoch(0);
    let gi = TripleSampler::new(ds.group_item(), SubjectKind::Group, 2, 1).map_err(|e| e.to_string())?.epoch(0);
    let users: Vec<usize> = (0..8).collect();
    let negatives = sample_contrast_negatives(&users, 2, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let batch = Batch { ui, gi, contrast: Some(ContrastBatch { users, negatives }) };

    let h = 1e-4;
    let mut covered: Vec<TensorKind> = Vec::new();
    let mut worst = (0.0f64, String::new());
    for mode in [Mode::S2, Mode::HhgrF] {
        let total = |p: &ModelParams| {
            objective(p, &s, Some(&views), mode, 0.7, Stage::Joint, &batch, false).map(|(l, _)| l.total)
        };
        let (_, grads) =
            objective(&params, &s, Some(&views), mode, 0.7, Stage::Joint, &batch, true).map_err(|e| e.to_string())?;
        for (kind, g) in &grads {
            let mut numeric = Array2::zeros(g.dim());
            for ((r, c), slot) in numeric.indexed_iter_mut() {
                let mut p = params.clone();
                p.tensor_mut(*kind)[[r, c]] += h;
                let up = total(&p).map_err(|e| e.to_string())?;
                p.tensor_mut(*kind)[[r, c]] -= 2.0 * h;
                let down = total(&p).map_err(|e| e.to_string())?;
                *slot = (up - down) / (2.0 * h);
            }
            let diff = (g - &numeric).iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let scale = numeric.iter().chain(g.iter()).fold(0.0f64, |a, x| a.max(x.abs()));
            if scale == 0.0 {
                return Err(format!("{mode} {}: gradient identically zero", kind.name()));
            }
            let rel = diff / scale;
            if rel > worst.0 {
                worst = (rel, format!("{mode} {}", kind.name()));
            }
            if !covered.contains(kind) {
                covered.push(*kind);
            }
        }
    }
    let missing: Vec<String> = ModelParams::layout(&dims)
        .into_iter()
        .filter(|k| !covered.contains(k))
        .map(|k| k.name())
        .collect();
    if !missing.is_empty() {
        return Err(format!("no gradient checked for {}", missing.join(", ")));
    }
    within(Duration::from_secs(30), started)?;
    check(
        worst.0 < 1e-4,
        format!("{} tensors, max relative error {:.1e} ({})", covered.len(), worst.0, worst.1),
    )
}

fn dropout_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut pairs = Vec::new();
    for e in 0..12 {
        for v in rand::seq::index::sample(&mut rng, 30, 5) {
            pairs.push((v, e));
        }
    }
    let h = IncidenceMatrix::new(30, 12, pairs).map_err(|e| e.to_string())?;
    for seed in 0..1000 {
        let (view, mask) = coarse_drop(&h, 0.2, seed).map_err(|e| e.to_string())?;
        for v in 0..h.num_vertices() {
            let kept = view.edges_of(v);
            let full = if mask.keep[v] { h.edges_of(v) } else { &[][..] };
            if kept != full {
                return Err(format!("seed {seed}: vertex {v} partially dropped"));
            }
        }
    }

    let entries: Vec<(usize, usize)> = h.entries().collect();
    let draws = 10_000;
    let mut dropped = vec![vec![false; draws]; entries.len()];
    for seed in 0..draws {
        let (_, mask) = fine_drop(&h, 0.3, seed as u64).map_err(|e| e.to_string())?;
        for (k, keep) in mask.keep.iter().enumerate() {
            dropped[k][seed] = !keep;
        }
    }
    let corr = |a: &[bool], b: &[bool]| {
        let n = a.len() as f64;
        let ma = a.iter().filter(|x| **x).count() as f64 / n;
        let mb = b.iter().filter(|x| **x).count() as f64 / n;
        let cov = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64 / n - ma * mb;
        cov / (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt()
    };
    let (mut worst, mut pairs_checked) = (0.0f64, 0usize);
    for v in 0..h.num_vertices() {
        let mine: Vec<usize> = (0..entries.len()).filter(|&k| entries[k].0 == v).collect();
        for (x, &a) in mine.iter().enumerate() {
            for &b in &mine[x + 1..] {
                worst = worst.max(corr(&dropped[a], &dropped[b]).abs());
                pairs_checked += 1;
            }
        }
    }
    check(
        worst < 0.05 && pairs_checked > 0,
        format!("1000 coarse draws whole-row; {pairs_checked} same-vertex column pairs, max |r| = {worst:.4}"),
    )
}

fn loss_decomposition() -> Outcome {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for mode in [Mode::S2, Mode::Hhgr, Mode::HhgrC] {
        let mut cfg = base_config(mode);
        cfg.data.synthetic = Some(SynthConfig {
            num_users: 60,
            num_items: 80,
            num_groups: 20,
            seed: 4,
            ..Default::default()
        });
        cfg.model.dim = 8;
        cfg.train.batch_size = 32;
        cfg.train.epochs_pretrain = 3;
        cfg.train.epochs = 5;
        cfg.train.n_neg = 3;
        cfg.ssl.beta = 0.7;
        let (ds, _) = cfg.load_dataset().map_err(|e| e.to_string())?;
        let split = split_groups(&ds, cfg.data.split, 4).map_err(|e| e.to_string())?;
        let out = train(&split, &cfg).map_err(|e| e.to_string())?;
        for step in &out.log.steps {
            let err = step.loss.decomposition_error();
            worst = worst.max(err);
            if !(err <= 1e-9) {
                return Err(format!("{mode} {:?} epoch {} step {}: error {err:e}", step.stage, step.epoch, step.step));
            }
            checked += 1;
        }
    }
    check(checked > 0, format!("{checked} logged steps, max error {worst:.1e}"))
}

fn whole_set_split(ds: InteractionDataset) -> SplitDataset {
    let groups = (0..ds.num_groups()).collect();
    let empty = || Holdout { groups: vec![], items: vec![] };
    SplitDataset { train: ds, train_groups: groups, validation: empty(), test: empty(), split_seed: 0 }
}

fn overfit_sanity() -> Outcome {
    let started = Instant::now();
    let synth = SynthConfig {
        num_users: 20,
        num_items: 30,
        num_groups: 8,
        group_size: (2, 4),
        density: 0.3,
        seed: 7,
        ..Default::default()
    };
    let ds = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let split = whole_set_split(ds);
    let mut cfg = base_config(Mode::Hhgr);
    cfg.model.dim = 16;
    cfg.train.epochs = 200;
    cfg.train.lr_user = 5e-3;
    cfg.train.lr_group = 5e-3;
    cfg.train.batch_size = 8;
    cfg.train.n_neg = 1;
    let out = train(&split, &cfg).map_err(|e| e.to_string())?;
    let s = Structure::from_dataset(&split.train).map_err(|e| e.to_string())?;
    let state = ForwardState::compute(&out.params, &s, None, Mode::Hhgr).map_err(|e| e.to_string())?;
    let opts = EvalOptions { ks: vec![5], ..Default::default() };
    let fit = training_fit(&state, &out.params.item_embed, split.train.group_item(), &opts).map_err(|e| e.to_string())?;
    let recall = fit.get(5).expect("k = 5 requested").recall;
    within(Duration::from_secs(60), started)?;
    check(
        recall >= 0.9,
        format!("training Recall@5 = {recall:.3} after {} epochs in {:.2?}", out.log.epochs.len(), started.elapsed()),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ssl_direction() -> Outcome {
    let (mut hhgr, mut s2) = (Vec::new(), Vec::new());
    let mut densest = 0.0f64;
    for seed in 0..10u64 {
        let synth = SynthConfig { group_density: Some(0.1), seed, ..Default::default() };
        let ds = generate_synthetic(&synth).map_err(|e| e.to_string())?;
        let density = ds.group_item().nnz() as f64 / (ds.num_groups() * ds.num_items()) as f64;
        densest = densest.max(density);
        if density > 0.05 {
            return Err(format!("seed {seed}: group-item density {density:.4} above 0.05"));
        }
        let split = split_groups(&ds, SplitRatios::default(), seed).map_err(|e| e.to_string())?;
        for (mode, sink) in [(Mode::Hhgr, &mut hhgr), (Mode::S2, &mut s2)] {
            let mut cfg = base_config(mode);
            cfg.model.dim = 32;
            cfg.train.lr_user = 1e-3;
            cfg.train.lr_group = 1e-3;
            cfg.train.batch_size = 64;
            cfg.train.epochs_pretrain = 5;
            cfg.train.epochs = 30;
            cfg.train.seed = seed;
            let out = train(&split, &cfg).map_err(|e| e.to_string())?;
            let report = evaluate(&out.params, &split, mode, &EvalOptions::default()).map_err(|e| e.to_string())?;
            sink.push(report.get(20).expect("k = 20 evaluated").ndcg);
        }
    }
    let wins = s2.iter().zip(&hhgr).filter(|(a, b)| a > b).count();
    let (mh, ms) = (median(hhgr), median(s2));
    check(
        ms >= mh,
        format!(
            "median test NDCG@20 S2 {ms:.4} vs HHGR {mh:.4}, gap {:+.4}, S2 ahead on {wins}/10 seeds, max density {densest:.4}",
            ms - mh
        ),
    )
}

/// Reference metrics: candidates in id order, stable sort by descending score.
fn brute_force_metrics(scores: &[f64], exclude: &[usize], relevant: &[usize], k: usize) -> (f64, f64, f64) {
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    ranked.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).expect("finite"));
    let mut dcg = 0.0;
    let mut hits = 0usize;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / (pos as f64 + 2.0).log2();
            hits += 1;
        }
    }
    let ideal: f64 = (0..relevant.len().min(k)).map(|pos| 1.0 / (pos as f64 + 2.0).log2()).sum();
    (dcg / ideal, hits as f64 / relevant.len().min(k) as f64, hits as f64 / relevant.len() as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.gen_range(2..=30);
        let levels = rng.gen_range(1..=n);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.25 - 1.0).collect();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let n_ex = rng.gen_range(0..n / 2 + 1);
        let mut exclude = ids[..n_ex].to_vec();
        exclude.sort_unstable();
        let n_rel = rng.gen_range(1..=n - n_ex);
        let relevant = ids[n_ex..n_ex + n_rel].to_vec();
        let k = rng.gen_range(1..=n);
        let list = RankedList::new(0, &scores, &exclude, &relevant, k);
        let (ndcg, recall_min, recall_full) = brute_force_metrics(&scores, &exclude, &relevant, k);
        let got = [
            ndcg_at_k(&list, k),
            recall_at_k(&list, k, RecallDenominator::Min),
            recall_at_k(&list, k, RecallDenominator::Full),
        ];
        for (name, g, want) in [("ndcg", got[0], ndcg), ("recall", got[1], recall_min), ("recall-full", got[2], recall_full)] {
            let g = g.ok_or_else(|| format!("case {case}: {name} undefined"))?;
            let err = (g - want).abs();
            worst = worst.max(err);
            if err > 1e-12 {
                return Err(format!("case {case}: {name}@{k} = {g}, brute force {want}"));
            }
        }
    }
    Ok(format!("1000 instances, max deviation {worst:.1e}"))
}

/// Groups along a path: consecutive groups share one member, so the
/// projection has edges but no triangles.
fn triangle_free_dataset() -> InteractionDataset {
    let groups = 12;
    let users = 3 * groups + 1;
    let items = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let membership: Vec<Vec<usize>> = (0..groups).map(|g| (3 * g..=3 * g + 3).collect()).collect();
    let ui: Vec<(usize, usize)> = (0..users)
        .flat_map(|u| rand::seq::index::sample(&mut rng, items, 6).into_iter().map(move |i| (u, i)).collect::<Vec<_>>())
        .collect();
    let gi: Vec<(usize, usize)> = (0..groups)
        .flat_map(|g| rand::seq::index::sample(&mut rng, items, 5).into_iter().map(move |i| (g, i)).collect::<Vec<_>>())
        .collect();
    InteractionDataset::new(
        SparseBinary::from_pairs(users, items, ui).expect("in range"),
        SparseBinary::from_pairs(groups, items, gi).expect("in range"),
        membership,
    )
    .expect("valid")
}

fn ablation_wiring() -> Outcome {
    let ds = triangle_free_dataset();
    let split = split_groups(&ds, SplitRatios::default(), 3).map_err(|e| e.to_string())?;
    let s = Structure::from_dataset(&split.train).map_err(|e| e.to_string())?;
    if !s.motif.is_zero() {
        return Err("motif matrix is not all-zero".into());
    }
    let run = |mode: Mode, group_layers: usize| -> Result<_, String> {
        let mut cfg = base_config(mode);
        cfg.model.dim = 8;
        cfg.model.group_layers = group_layers;
        cfg.train.epochs = 15;
        cfg.train.batch_size = 16;
        cfg.train.n_neg = 3;
        cfg.train.lr_user = 5e-3;
        cfg.train.lr_group = 5e-3;
        let out = train(&split, &cfg).map_err(|e| e.to_string())?;
        let state = ForwardState::compute(&out.params, &s, None, mode).map_err(|e| e.to_string())?;
        let report = evaluate(&out.params, &split, mode, &EvalOptions::default()).map_err(|e| e.to_string())?;
        Ok((out.params, state.groups, report))
    };
    let (p_wg, z_wg, r_wg) = run(Mode::HhgrWg, 0)?;
    let (p_full, z_full, r_full) = run(Mode::Hhgr, 1)?;
    let shared = ModelParams::layout(&p_wg.dims);
    let mut differing = Vec::new();
    for kind in &shared {
        if p_wg.tensor(*kind) != p_full.tensor(*kind) {
            differing.push(kind.name());
        }
    }
    if !differing.is_empty() {
        return Err(format!("trained tensors differ: {}", differing.join(", ")));
    }
    if z_wg != z_full {
        return Err("group representations differ".into());
    }
    let mut detail = String::new();
    for (k, m) in &r_full.metrics {
        let _ = write!(detail, "N@{k} {:.4} R@{k} {:.4} ", m.ndcg, m.recall);
    }
    check(
        r_wg == r_full,
        format!("{} shared tensors and group vectors identical; metrics equal ({})", shared.len(), detail.trim_end()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = base_config(Mode::S2);
    cfg.data.synthetic = Some(SynthConfig { num_users: 50, num_items: 60, num_groups: 15, seed: 21, ..Default::default() });
    cfg.model.dim = 8;
    cfg.train.epochs_pretrain = 2;
    cfg.train.epochs = 4;
    cfg.train.batch_size = 32;
    cfg.train.n_neg = 3;
    cfg.train.seed = 21;
    let mut bytes = Vec::new();
    for run in 0..2 {
        let (ds, _) = cfg.load_dataset().map_err(|e| e.to_string())?;
        let split = split_groups(&ds, cfg.data.split, cfg.data.split_seed).map_err(|e| e.to_string())?;
        let out = train(&split, &cfg).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{run}.bin"));
        let meta = CheckpointMeta::new(cfg.model.mode, out.params.dims, serde_json::Value::Null);
        save_checkpoint(&path, &out.params, &meta).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    check(bytes[0] == bytes[1], format!("two runs, {} checkpoint bytes each, identical", bytes[0].len()))
}

fn main() -> ExitCode {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("first pool");
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("motif oracle", motif_oracle),
        ("propagation stochasticity", propagation_stochasticity),
        ("gradient correctness", gradient_correctness),
        ("dropout semantics", dropout_semantics),
        ("loss decomposition", loss_decomposition),
        ("overfit sanity", overfit_sanity),
        ("SSL direction", ssl_direction),
        ("metric oracle", metric_oracle),
        ("ablation wiring", ablation_wiring),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = run();
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {took:>9.2?}  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<26} {took:>9.2?}  {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
