//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! The training criteria share one cache of finished runs under
//! `target/acceptance/<dataset digest>/runs`, keyed by config hash. Set
//! `SOP_ACCEPTANCE_FRESH=1` to discard it, or `SOP_ACCEPTANCE_DIR` to move it.
//! `SOP_ACCEPTANCE_QUICK=1` runs only the criteria that need no training.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sop::data::{generate_synthetic, multicrop_batch, save_dataset, ImageDataset};
use sop::evalkit::{extract_features, knn_eval, FeatureTable, TAU_KNN};
use sop::memory::{build_sop, sample_anchors, ContributionMode, MemoryBank, SopSet};
use sop::model::{
    block_mask, momentum_schedule, random_mask, EncoderConfig, EncoderState, GlobalFeature, Images,
    MaskSpec,
};
use sop::numerics::{grad_check, rowwise_l2_normalize, topk_rowwise, Matrix, Tape, Var};
use sop::objective::{
    cls_loss, cls_loss_graph, mim_loss_graph, parametric_cls_loss, sop_mim_loss, sop_probs,
    sop_probs_graph, LossWeights, PrototypeBaseline, SopProbabilities,
};
use sop::trainer::{fixed_anchor_mode, student_forward, LossPlan, TrainConfig, TrainMode};
use sop_cli::{ablate, run_cell, AblateArgs, CellResult, SplitArgs};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: &str, name: &str, f: impl FnOnce() -> Outcome, failures: &mut Vec<String>) {
    let start = Instant::now();
    let o = f();
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!(
        "[{tag}] {id} {name}: {} ({:.1}s)",
        o.detail,
        start.elapsed().as_secs_f64()
    );
    std::io::stdout().flush().ok();
    if !o.pass {
        failures.push(id.to_string());
    }
}

fn random_unit(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    rowwise_l2_normalize(&m).unwrap()
}

fn random_bank(cap: usize, dim: usize, fill: usize, rng: &mut ChaCha8Rng) -> MemoryBank<f64> {
    let mut bank = MemoryBank::init(cap, dim, rng.random());
    if fill > 0 {
        bank.push(&random_unit(fill, dim, rng)).unwrap();
    }
    bank
}

fn random_mode(rng: &mut ChaCha8Rng) -> ContributionMode {
    match rng.random_range(0..3) {
        0 => ContributionMode::OneHot,
        1 => ContributionMode::Smoothed(rng.random_range(0.0..0.5)),
        _ => ContributionMode::SimilaritySoft(rng.random_range(0.0..0.5)),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_loop(logits: &[f64], tau: f64) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|l| ((l - mx) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ce_loop(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .map(|(a, b)| a * b.max(1e-12).ln())
        .sum::<f64>()
}

/// `softmax(u Dᵀ / tau) Y` one row at a time.
fn sop_probs_loop(u: &Matrix<f64>, sop: &SopSet<f64>, tau: f64) -> Vec<Vec<f64>> {
    (0..u.rows())
        .map(|r| {
            let logits: Vec<f64> = (0..sop.d.rows())
                .map(|j| dot(u.row(r), sop.d.row(j)))
                .collect();
            let member = softmax_loop(&logits, tau);
            (0..sop.y.cols())
                .map(|c| (0..member.len()).map(|j| member[j] * sop.y.get(j, c)).sum())
                .collect()
        })
        .collect()
}

fn cross_view_loop(student: &[Vec<Vec<f64>>], teacher: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (g, t) in teacher.iter().enumerate() {
        for (v, s) in student.iter().enumerate() {
            if v == g {
                continue;
            }
            for b in 0..t.len() {
                total += ce_loop(&t[b], &s[b]);
                n += 1;
            }
        }
    }
    total / n as f64
}

fn to_probs(rows: &[Vec<f64>]) -> SopProbabilities<f64> {
    SopProbabilities {
        probs: Matrix::from_rows(rows).unwrap(),
    }
}

fn c1_distribution_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut worst_sum, mut min_p) = (0.0f64, f64::INFINITY);
    let mut per_mode = [0usize; 3];
    for i in 0..1000 {
        let dim = rng.random_range(2..=32);
        let cap = rng.random_range(4..=256);
        let k = rng.random_range(0..=(cap - 1).min(16));
        let anchors_n = rng.random_range(2..=cap.min(64));
        let mode = match i % 3 {
            0 => ContributionMode::OneHot,
            1 => ContributionMode::Smoothed(rng.random_range(0.0..0.9)),
            _ => ContributionMode::SimilaritySoft(rng.random_range(0.0..0.9)),
        };
        per_mode[i % 3] += 1;
        let bank = random_bank(cap, dim, rng.random_range(0..=cap), &mut rng);
        let anchors = sample_anchors(&bank, anchors_n, &mut rng).unwrap();
        let sop = build_sop(&bank, &anchors, k, mode).unwrap();
        let u = Matrix::from_fn(rng.random_range(1..=16), dim, |_, _| {
            rng.random_range(-3.0f32..3.0)
        });
        let tau = rng.random_range(0.02f32..1.0);
        let sop32 = SopSet {
            d: sop.d.cast::<f32>(),
            y: sop.y.cast::<f32>(),
            member_scores: sop.member_scores.cast::<f32>(),
            anchor_indices: sop.anchor_indices.clone(),
            member_indices: sop.member_indices.clone(),
            num_anchors: sop.num_anchors,
            members_per_sop: sop.members_per_sop,
        };
        let p = sop_probs(&u, &sop32, tau).unwrap();
        for row in p.probs.row_iter() {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            for &v in row {
                min_p = min_p.min(f64::from(v));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_sum <= 1e-5 && min_p >= 0.0 && secs < 10.0,
        format!(
            "1000 instances (one_hot/smoothed/similarity_soft = {:?}), max |row sum - 1| = {worst_sum:.2e}, min p = {min_p:.2e}, {secs:.2}s of 10s",
            per_mode
        ),
    )
}

fn c2_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;

    // member sets against exhaustive ranking
    for _ in 0..200 {
        let dim = rng.random_range(2..=32);
        let cap = rng.random_range(3..=128);
        let fill = rng.random_range(0..=2 * cap);
        let bank = random_bank(cap, dim, fill, &mut rng);
        let k = rng.random_range(0..=(cap - 1).min(12));
        let anchors = sample_anchors(&bank, rng.random_range(1..=cap), &mut rng).unwrap();
        let sop = build_sop(&bank, &anchors, k, random_mode(&mut rng)).unwrap();
        let store = bank.storage();
        for (i, &a) in anchors.iter().enumerate() {
            let mut ranked: Vec<(f64, usize)> = (0..bank.filled())
                .filter(|&j| j != a)
                .map(|j| (dot(store.row(a), store.row(j)), j))
                .collect();
            ranked.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let mut want = vec![a];
            want.extend(ranked.iter().take(k).map(|&(_, j)| j));
            if sop.members(i) != want.as_slice() {
                failures.push(format!("members of anchor {a}"));
            }
        }
    }

    // top-k against a full sort
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..20), rng.random_range(1..60));
        let m = Matrix::from_fn(r, c, |_, _| (rng.random_range(-5i32..5) as f64) * 0.5);
        let k = rng.random_range(0..=c);
        let top = topk_rowwise(&m, k).unwrap();
        for row in 0..r {
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&x, &y| {
                m.get(row, y)
                    .partial_cmp(&m.get(row, x))
                    .unwrap()
                    .then(x.cmp(&y))
            });
            if top.row_indices(row) != &idx[..k] {
                failures.push("topk order".into());
            }
        }
    }

    // FIFO against a queue model
    for _ in 0..200 {
        let (cap, dim) = (rng.random_range(1..40), rng.random_range(1..8));
        let mut bank = MemoryBank::<f64>::init(cap, dim, rng.random());
        let mut model: VecDeque<Vec<f64>> =
            bank.ordered().row_iter().map(<[f64]>::to_vec).collect();
        for _ in 0..rng.random_range(1..10) {
            let rows = random_unit(rng.random_range(1..2 * cap + 2), dim, &mut rng);
            bank.push(&rows).unwrap();
            for r in rows.row_iter() {
                model.push_back(r.to_vec());
                if model.len() > cap {
                    model.pop_front();
                }
            }
        }
        let got = bank.ordered();
        for (a, b) in got.row_iter().zip(&model) {
            worst = worst.max(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max),
            );
        }
        if got.rows() != model.len() {
            failures.push("fifo length".into());
        }
    }

    // k-NN against a scalar loop
    for _ in 0..20 {
        let dim = rng.random_range(2..12);
        let classes = rng.random_range(2..6u32);
        let (ntr, nte) = (rng.random_range(10..120), rng.random_range(5..60));
        let mk = |n: usize, rng: &mut ChaCha8Rng| {
            let m = Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
            let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
            FeatureTable::new(&m, labels).unwrap()
        };
        let (train, test) = (mk(ntr, &mut rng), mk(nte, &mut rng));
        let k = rng.random_range(1..=ntr);
        let got = knn_eval(&train, &test, k, TAU_KNN).unwrap();
        let mut correct = 0;
        for i in 0..test.len() {
            let mut sims: Vec<(f64, usize)> = (0..train.len())
                .map(|j| (dot(test.features.row(i), train.features.row(j)), j))
                .collect();
            sims.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let mut votes = vec![0.0; classes as usize];
            for &(s, j) in &sims[..k] {
                votes[train.labels[j] as usize] += (s / TAU_KNN).exp();
            }
            let mut best = 0;
            for c in 1..votes.len() {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            correct += usize::from(best == test.labels[i] as usize);
        }
        worst = worst.max((got - correct as f64 / test.len() as f64).abs());
    }

    // loss values
    for _ in 0..50 {
        let dim = rng.random_range(2..16);
        let bank = random_bank(48, dim, 0, &mut rng);
        let k = rng.random_range(0..6);
        let anchors = sample_anchors(&bank, rng.random_range(2..16), &mut rng).unwrap();
        let sop = build_sop(&bank, &anchors, k, random_mode(&mut rng)).unwrap();
        let (views, batch) = (rng.random_range(2..5), rng.random_range(1..6));
        let (tau_s, tau_t) = (0.1, 0.05);
        let s_emb: Vec<Matrix<f64>> = (0..views)
            .map(|_| random_unit(batch, dim, &mut rng))
            .collect();
        let t_emb: Vec<Matrix<f64>> = (0..2).map(|_| random_unit(batch, dim, &mut rng)).collect();
        let s_loop: Vec<Vec<Vec<f64>>> = s_emb
            .iter()
            .map(|z| sop_probs_loop(z, &sop, tau_s))
            .collect();
        let t_loop: Vec<Vec<Vec<f64>>> = t_emb
            .iter()
            .map(|z| sop_probs_loop(z, &sop, tau_t))
            .collect();
        let s_lib: Vec<SopProbabilities<f64>> = s_emb
            .iter()
            .map(|z| sop_probs(z, &sop, tau_s).unwrap())
            .collect();
        let t_lib: Vec<SopProbabilities<f64>> = t_emb
            .iter()
            .map(|z| sop_probs(z, &sop, tau_t).unwrap())
            .collect();
        for (a, b) in s_lib.iter().zip(&s_loop) {
            worst = worst.max(a.probs.max_abs_diff(&Matrix::from_rows(b).unwrap()));
        }
        let want = cross_view_loop(&s_loop, &t_loop);
        worst = worst.max((cls_loss(&s_lib, &t_lib).unwrap() - want).abs());
        let mut tape = Tape::new();
        let stacked: Vec<&Matrix<f64>> = s_emb.iter().collect();
        let u = tape.constant(Matrix::vstack(&stacked).unwrap());
        let p = sop_probs_graph(&mut tape, u, &sop, tau_s).unwrap();
        let l = cls_loss_graph(&mut tape, p, views, &t_lib).unwrap();
        worst = worst.max((tape.scalar(l) - want).abs());

        // patch loss with masks
        let l_patches = rng.random_range(2..6);
        let masks: Vec<Vec<MaskSpec>> = (0..2)
            .map(|_| {
                (0..batch)
                    .map(|_| random_mask(l_patches, 0.5, &mut rng))
                    .collect()
            })
            .collect();
        let tp: Vec<Matrix<f64>> = (0..2)
            .map(|_| {
                sop_probs(&random_unit(batch * l_patches, dim, &mut rng), &sop, tau_t)
                    .unwrap()
                    .probs
            })
            .collect();
        let sp: Vec<Matrix<f64>> = (0..2)
            .map(|_| {
                sop_probs(&random_unit(batch * l_patches, dim, &mut rng), &sop, tau_s)
                    .unwrap()
                    .probs
            })
            .collect();
        let mut want = 0.0;
        for v in 0..2 {
            let count: usize = masks[v].iter().map(MaskSpec::count).sum();
            let mut s = 0.0;
            for b in 0..batch {
                for pos in 0..l_patches {
                    if masks[v][b].mask[pos] {
                        let r = b * l_patches + pos;
                        s += ce_loop(tp[v].row(r), sp[v].row(r));
                    }
                }
            }
            if count > 0 {
                want += s / count as f64;
            }
        }
        worst = worst.max((sop_mim_loss(&tp, &sp, &masks).unwrap() - want).abs());
        let rows: Vec<Vec<f64>> = sop::objective::masked_rows(&masks)
            .iter()
            .map(|&(v, r, _)| sp[v].row(r).to_vec())
            .collect();
        if !rows.is_empty() {
            let mut tape = Tape::new();
            let s = tape.constant(Matrix::from_rows(&rows).unwrap());
            let l = mim_loss_graph(&mut tape, s, &tp, &masks).unwrap();
            worst = worst.max((tape.scalar(l) - want).abs());
        }

        // prototype baseline
        let mut base = PrototypeBaseline::new(rng.random_range(2..10), dim, rng.random(), 0.9);
        base.center = (0..base.num_prototypes())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let proto = |z: &Matrix<f64>, tau: f64, center: bool| -> Vec<Vec<f64>> {
            z.row_iter()
                .map(|row| {
                    let logits: Vec<f64> = (0..base.theta.rows())
                        .map(|j| {
                            dot(row, base.theta.row(j)) - if center { base.center[j] } else { 0.0 }
                        })
                        .collect();
                    softmax_loop(&logits, tau)
                })
                .collect()
        };
        let s_loop: Vec<Vec<Vec<f64>>> = s_emb.iter().map(|z| proto(z, tau_s, false)).collect();
        let t_loop: Vec<Vec<Vec<f64>>> = t_emb.iter().map(|z| proto(z, tau_t, true)).collect();
        let got = parametric_cls_loss(&s_emb, &t_emb, &base, tau_s, tau_t).unwrap();
        worst = worst.max((got - cross_view_loop(&s_loop, &t_loop)).abs());
    }

    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && worst <= 1e-6 && secs < 60.0,
        format!(
            "200 banks, 200 top-k, 200 FIFO, 20 k-NN and 50 loss cases; {} ordering mismatches, max deviation {worst:.2e}, {secs:.1}s of 60s",
            failures.len()
        ),
    )
}

fn c3_gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        batch_size: 4,
        v_local: 2,
        local_size: 4,
        encoder: EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            proj_hidden: 8,
            proj_out: 16,
        },
        ..TrainConfig::default()
    };
    let ds = generate_synthetic(2, 2, 8, 20.0, 5).unwrap();
    let views = multicrop_batch::<f64>(&ds, &[0, 1, 2, 3], 2, &cfg.crop_config(), 3, 0);
    let globals = Images::concat(&[&views[0], &views[1]]);
    let locals = Images::concat(&[&views[2], &views[3]]);
    let init = EncoderState::<f64>::new(cfg.encoder.clone(), 1).unwrap();
    // At initialization the head output is nearly zero and the normalization
    // after it is so curved that a 1e-5 central difference carries an O(h^2)
    // truncation error above the tolerance. Check at a generic point nearby.
    let mut student = init.clone();
    let mut jitter = ChaCha8Rng::seed_from_u64(31);
    for t in student.tensors_mut() {
        for v in t.data_mut() {
            *v += jitter.random_range(-0.3..0.3);
        }
    }
    let teacher = EncoderState::<f64>::new(cfg.encoder.clone(), 2).unwrap();
    let l = cfg.encoder.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let masks: Vec<Vec<MaskSpec>> = (0..2)
        .map(|_| (0..4).map(|_| random_mask(l, 0.5, &mut rng)).collect())
        .collect();

    let t_out = teacher.encode(&globals, None).unwrap();
    let dim = cfg.dim();
    let bank_cls = random_bank(16, dim, 0, &mut rng);
    let bank_patch = random_bank(16, dim, 0, &mut rng);
    let (tau_s, tau_t) = (0.1, 0.07);
    let cls_sops: Vec<SopSet<f64>> = (0..2)
        .map(|_| {
            let a = sample_anchors(&bank_cls, 4, &mut rng).unwrap();
            build_sop(&bank_cls, &a, 2, ContributionMode::SimilaritySoft(0.1)).unwrap()
        })
        .collect();
    let a = sample_anchors(&bank_patch, 4, &mut rng).unwrap();
    let patch_sop = build_sop(&bank_patch, &a, 0, ContributionMode::Smoothed(0.1)).unwrap();
    let cls_targets = cls_sops
        .iter()
        .map(|sop| {
            (0..2)
                .map(|g| {
                    let z = t_out
                        .cls
                        .select_rows(&(g * 4..(g + 1) * 4).collect::<Vec<_>>());
                    sop_probs(&z, sop, tau_t).unwrap()
                })
                .collect()
        })
        .collect();
    let mim_targets = vec![(0..2)
        .map(|v| {
            let z = t_out
                .patches
                .select_rows(&(v * 4 * l..(v + 1) * 4 * l).collect::<Vec<_>>());
            sop_probs(&z, &patch_sop, tau_t).unwrap().probs
        })
        .collect()];
    let plan = LossPlan {
        views: 4,
        cls_targets,
        mim_targets,
        masks: masks.clone(),
        weights: LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
        },
    };

    let check = |enc: &EncoderState<f64>| -> (f64, String, usize) {
        let mut worst = 0.0f64;
        let mut worst_name = String::new();
        let mut checked = 0;
        for (i, name) in enc.names().iter().enumerate() {
            let loss = |tape: &mut Tape<f64>, x: Var| -> Var {
                let mut pv = enc.register(tape, false);
                pv.vars[i] = x;
                let (s_cls, s_patch) =
                    student_forward(tape, &student, &pv, &globals, Some(&locals), &masks).unwrap();
                let sc: Vec<Var> = cls_sops
                    .iter()
                    .map(|sop| sop_probs_graph(tape, s_cls, sop, tau_s).unwrap())
                    .collect();
                let sp = vec![sop_probs_graph(tape, s_patch.unwrap(), &patch_sop, tau_s).unwrap()];
                plan.loss_graph(tape, &sc, &sp).unwrap().total
            };
            let err = grad_check(loss, &enc.tensors()[i]).unwrap_or(f64::INFINITY);
            checked += enc.tensors()[i].len();
            if err > worst {
                worst = err;
                worst_name = name.clone();
            }
        }
        (worst, worst_name, checked)
    };
    let (worst, worst_name, checked) = check(&student);
    let (at_init, init_name, _) = check(&init);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 300.0,
        format!(
            "{checked} encoder parameters, max relative error {worst:.2e} (at {worst_name}); at initialization {at_init:.2e} (at {init_name}, truncation dominated); {secs:.1}s of 300s"
        ),
    )
}

fn c4_special_case_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (cap, dim) = (rng.random_range(4..64), rng.random_range(2..16));
        let bank = random_bank(cap, dim, rng.random_range(0..2 * cap), &mut rng);
        let anchors = sample_anchors(&bank, cap, &mut rng).unwrap();
        let sop = build_sop(&bank, &anchors, 0, ContributionMode::OneHot).unwrap();
        let (views, batch) = (rng.random_range(2..6), rng.random_range(1..8));
        let (tau_s, tau_t) = (0.1, 0.04);
        let s_emb: Vec<Matrix<f64>> = (0..views)
            .map(|_| random_unit(batch, dim, &mut rng))
            .collect();
        let t_emb: Vec<Matrix<f64>> = (0..2).map(|_| random_unit(batch, dim, &mut rng)).collect();
        // plain softmax over every memory slot
        let memory = |z: &Matrix<f64>, tau: f64| -> Vec<Vec<f64>> {
            z.row_iter()
                .map(|row| {
                    let logits: Vec<f64> =
                        (0..cap).map(|j| dot(row, bank.storage().row(j))).collect();
                    softmax_loop(&logits, tau)
                })
                .collect()
        };
        let want = cross_view_loop(
            &s_emb.iter().map(|z| memory(z, tau_s)).collect::<Vec<_>>(),
            &t_emb.iter().map(|z| memory(z, tau_t)).collect::<Vec<_>>(),
        );
        let s: Vec<SopProbabilities<f64>> = s_emb
            .iter()
            .map(|z| sop_probs(z, &sop, tau_s).unwrap())
            .collect();
        let t: Vec<SopProbabilities<f64>> = t_emb
            .iter()
            .map(|z| sop_probs(z, &sop, tau_t).unwrap())
            .collect();
        worst = worst.max((cls_loss(&s, &t).unwrap() - want).abs());
        // the prototype distribution is the memory distribution, permuted
        let direct = memory(&s_emb[0], tau_s);
        let perm: Vec<Vec<f64>> = direct
            .iter()
            .map(|r| anchors.iter().map(|&a| r[a]).collect())
            .collect();
        worst = worst.max(s[0].probs.max_abs_diff(&to_probs(&perm).probs));
    }
    outcome(
        worst <= 1e-6,
        format!("20 banks with k=0, one_hot, K = bank size; max |cls_loss - memory cross-distillation| = {worst:.2e}"),
    )
}

struct Bench {
    train: ImageDataset,
    test: ImageDataset,
    data_path: PathBuf,
    root: PathBuf,
    runs: PathBuf,
}

fn bench() -> Bench {
    let ds = generate_synthetic(10, 250, 32, 30.0, 0).unwrap();
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target"));
    let root = std::env::var_os("SOP_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| target.join("acceptance"))
        .join(&ds.digest()[..12]);
    if std::env::var("SOP_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") && root.exists() {
        fs::remove_dir_all(&root).unwrap();
    }
    fs::create_dir_all(&root).unwrap();
    let data_path = root.join("data.sopd");
    save_dataset(&ds, &data_path).unwrap();
    let (train, test) = ds.split(0.8, 0);
    Bench {
        train,
        test,
        data_path,
        runs: root.join("runs"),
        root,
    }
}

fn cell(b: &Bench, cfg: &TrainConfig) -> CellResult {
    run_cell(cfg, BTreeMap::new(), &b.train, &b.test, &b.runs, 10).unwrap()
}

fn untrained_knn(b: &Bench) -> f64 {
    let enc = EncoderState::<f32>::new(TrainConfig::default().encoder, 0).unwrap();
    let train = extract_features(&enc, &b.train, GlobalFeature::Cls).unwrap();
    let test = extract_features(&enc, &b.test, GlobalFeature::Cls).unwrap();
    knn_eval(&train, &test, 10, TAU_KNN).unwrap()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.1}%", 100.0 * x))
}

fn c5_end_to_end(b: &Bench, c5: &CellResult) -> Outcome {
    let cfg = TrainConfig::default();
    let ln_k = (cfg.num_anchors as f64).ln();
    let knn = c5.knn_accuracy.unwrap_or(0.0);
    let (lo, hi) = (
        c5.min_teacher_entropy.unwrap_or(0.0),
        c5.max_teacher_entropy.unwrap_or(f64::INFINITY),
    );
    let pass =
        c5.finished() && knn >= 0.80 && lo > 0.05 * ln_k && hi < ln_k && c5.runtime_secs < 1200.0;
    outcome(
        pass,
        format!(
            "{}x{} train/test, {} steps, K={} k={} K_patch={} T_c={} T_m={} block masking {}: k-NN@10 {} (untrained encoder {}), status {}, teacher entropy in [{lo:.3}, {hi:.3}] vs ({:.3}, {ln_k:.3}), training {:.0}s of 1200s",
            b.train.n,
            b.test.n,
            cfg.steps,
            cfg.num_anchors,
            cfg.k,
            cfg.num_patch_anchors,
            cfg.tasks_cls,
            cfg.tasks_mim,
            cfg.mask_ratio,
            pct(c5.knn_accuracy),
            pct(Some(untrained_knn(b))),
            c5.status,
            0.05 * ln_k,
            c5.runtime_secs
        ),
    )
}

fn c6_fixed_anchor_collapse(b: &Bench, c5: &CellResult) -> Outcome {
    let cfg = fixed_anchor_mode(&TrainConfig::default()).unwrap();
    let fixed = cell(b, &cfg);
    let d = cfg.dim() as f64;
    let drop = c5.knn_accuracy.unwrap_or(0.0) - fixed.knn_accuracy.unwrap_or(0.0);
    let rank = fixed.effective_rank.unwrap_or(0.0);
    outcome(
        fixed.status != "ok" || drop >= 0.20 || rank < 0.25 * d,
        format!(
            "fixed anchors k-NN {} vs {} resampled (drop {:.1} points, need 20), effective rank {rank:.2} vs resampled {:.2} (need < {:.0}), status {}",
            pct(fixed.knn_accuracy),
            pct(c5.knn_accuracy),
            100.0 * drop,
            c5.effective_rank.unwrap_or(0.0),
            0.25 * d,
            fixed.status
        ),
    )
}

struct Trend {
    id: &'static str,
    name: &'static str,
    param: &'static str,
    values: [Value; 2],
    /// Holds when `acc(values[0]) - acc(values[1]) >= -slack`, or, with
    /// `two_sided`, when the gap is within `slack` either way.
    slack: f64,
    two_sided: bool,
}

fn c7_trend(b: &Bench, t: &Trend, failures: &mut Vec<String>) {
    report(
        t.id,
        t.name,
        || {
            let grid = b.root.join(format!("grid_{}.json", t.id));
            let doc = json!({ "seed": [0, 1, 2], t.param: t.values.clone() });
            fs::write(&grid, doc.to_string()).unwrap();
            let rows = ablate(&AblateArgs {
                grid,
                data: b.data_path.clone(),
                out: b.root.join(format!("ablate_{}", t.id)),
                base_config: None,
                max_cells: 64,
                knn_k: 10,
                split: SplitArgs::default(),
                runs_dir: Some(b.runs.clone()),
            })
            .unwrap();
            let acc = |seed: u64, v: &Value| -> Option<f64> {
                rows.iter()
                    .find(|r| r.params["seed"] == json!(seed) && &r.params[t.param] == v)
                    .and_then(|r| r.knn_accuracy)
            };
            let mut held = 0;
            let mut parts = Vec::new();
            for seed in 0..3 {
                let (a, c) = (acc(seed, &t.values[0]), acc(seed, &t.values[1]));
                let ok = match (a, c) {
                    (Some(a), Some(c)) if t.two_sided => (a - c).abs() <= t.slack,
                    (Some(a), Some(c)) => a - c >= -t.slack,
                    _ => false,
                };
                held += usize::from(ok);
                parts.push(format!(
                    "seed {seed}: {} vs {}{}",
                    pct(a),
                    pct(c),
                    if ok { "" } else { " (misses)" }
                ));
            }
            outcome(
                held >= 2,
                format!(
                    "{} = {} vs {}; {}; holds on {held}/3 seeds",
                    t.param,
                    t.values[0],
                    t.values[1],
                    parts.join(", ")
                ),
            )
        },
        failures,
    );
}

fn c8_baseline_stability(b: &Bench) -> Outcome {
    let base = TrainConfig {
        mode: TrainMode::ParametricBaseline,
        ..TrainConfig::default()
    };
    let with = cell(b, &base);
    let without = cell(
        b,
        &TrainConfig {
            centering: false,
            ..base.clone()
        },
    );
    let d = base.dim() as f64;
    let rank = without.effective_rank.unwrap_or(0.0);
    let ok_with = with.finished() && with.knn_accuracy.is_some();
    let ok_without = without.status == "non_finite" || rank < 0.25 * d;
    outcome(
        ok_with && ok_without,
        format!(
            "with centering: status {}, k-NN {}, effective rank {:.2}; without centering: status {}, k-NN {}, effective rank {rank:.2} (need abort or < {:.0})",
            with.status,
            pct(with.knn_accuracy),
            with.effective_rank.unwrap_or(0.0),
            without.status,
            pct(without.knn_accuracy),
            0.25 * d
        ),
    )
}

fn c9_schedule_endpoints() -> Outcome {
    let mut problems = Vec::new();
    for &(total, m0) in &[(2000usize, 0.994), (10, 0.9), (1, 0.5), (12345, 0.996)] {
        if momentum_schedule(0, total, m0) != m0 || momentum_schedule(total, total, m0) != 1.0 {
            problems.push(format!("momentum endpoints at total={total}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut rand_bad, mut block_lo, mut block_hi) = (0, f64::INFINITY, 0.0f64);
    let cases = [(8usize, 0.3), (8, 0.5), (14, 0.4), (4, 0.3)];
    for i in 0..10_000 {
        let (g, ratio) = cases[i % cases.len()];
        let r = random_mask(g * g, ratio, &mut rng);
        if r.count() != (ratio * (g * g) as f64).round() as usize {
            rand_bad += 1;
        }
        let b = block_mask(g, g, ratio, &mut rng);
        let excess = b.fraction() - ratio;
        block_lo = block_lo.min(excess);
        block_hi = block_hi.max(excess);
    }
    let block_ok = block_lo >= -1e-12 && block_hi <= 0.1 + 1e-12;
    outcome(
        problems.is_empty() && rand_bad == 0 && block_ok,
        format!(
            "momentum endpoints exact; 10000 draws: random masks off-count {rand_bad}, block mask fraction - ratio in [{block_lo:.3}, {block_hi:.3}] (allowed [0, 0.1]){}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }
        ),
    )
}

fn main() {
    sop_cli::keep_freed_memory();
    let mut failures = Vec::new();
    report(
        "C1",
        "distribution validity",
        c1_distribution_validity,
        &mut failures,
    );
    report(
        "C2",
        "oracle equivalence",
        c2_oracle_equivalence,
        &mut failures,
    );
    report(
        "C3",
        "gradient correctness",
        c3_gradient_correctness,
        &mut failures,
    );
    report(
        "C4",
        "special-case reduction",
        c4_special_case_reduction,
        &mut failures,
    );
    report(
        "C9",
        "schedule endpoints and masking ratios",
        c9_schedule_endpoints,
        &mut failures,
    );

    if std::env::var("SOP_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1") {
        println!("acceptance: training criteria skipped (SOP_ACCEPTANCE_QUICK=1)");
        if !failures.is_empty() {
            std::process::exit(1);
        }
        return;
    }
    let b = bench();
    let c5 = cell(&b, &TrainConfig::default());
    report(
        "C5",
        "end-to-end learning",
        || c5_end_to_end(&b, &c5),
        &mut failures,
    );
    report(
        "C6",
        "fixed-anchor collapse",
        || c6_fixed_anchor_collapse(&b, &c5),
        &mut failures,
    );
    report(
        "C8",
        "baseline stability",
        || c8_baseline_stability(&b),
        &mut failures,
    );
    let trends = [
        Trend {
            id: "C7a",
            name: "k=8 vs k=1 neighbours",
            param: "k",
            values: [json!(8), json!(1)],
            slack: 0.02,
            two_sided: false,
        },
        Trend {
            id: "C7b",
            name: "similarity-soft vs one-hot contributions",
            param: "cls_mode",
            values: [
                json!({"kind": "similarity_soft", "smoothing": 0.1}),
                json!({"kind": "one_hot"}),
            ],
            slack: 0.01,
            two_sided: false,
        },
        Trend {
            id: "C7c",
            name: "blockwise vs random masking",
            param: "mask_strategy",
            values: [json!("block"), json!("random")],
            slack: 0.01,
            two_sided: false,
        },
        Trend {
            id: "C7d",
            name: "K=64 vs K=256 anchors",
            param: "num_anchors",
            values: [json!(64), json!(256)],
            slack: 0.03,
            two_sided: true,
        },
    ];
    for t in &trends {
        c7_trend(&b, t, &mut failures);
    }

    if failures.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", failures.join(", "));
        std::process::exit(1);
    }
}
