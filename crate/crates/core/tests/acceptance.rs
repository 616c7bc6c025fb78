//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`) and exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmfs_core::autodiff::{Tape, Var};
use mmfs_core::checkpoint::Checkpoint;
use mmfs_core::config::{
    ContextScope, EncoderMode, EvalConfig, MaskDecoderKind, MetaLearnFlags, ModelConfig, PromptDesign, TokenizerKind,
};
use mmfs_core::data::{
    generate_synthetic_dataset, load_dataset, save_dataset, Dataset, SegmentAnnotation, SplitRatios, SynthConfig,
};
use mmfs_core::encoders::AdapterUnit;
use mmfs_core::episode::{episode_rng, sample_episode};
use mmfs_core::head::{classify_snippets, ClassProbMap};
use mmfs_core::inference::{segment_iou, soft_nms, Detection, DetectionSet};
use mmfs_core::losses::{loss_background, loss_classification, loss_mask, loss_token_contrastive, mask_targets, Stage};
use mmfs_core::metrics::{evaluate_map, VideoGroundTruth};
use mmfs_core::model::{EpisodeData, ForwardOptions, Model};
use mmfs_core::params::{BlockSet, ParamStore};
use mmfs_core::prompt::SemanticsTokenizer;
use mmfs_core::protocol::{run_protocol, EvalReport};
use mmfs_core::training::{base_train, episode_loss, meta_train};
use mmfs_core::{ExperimentConfig, Matrix, Mode};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradients match finite differences", gradients),
        ("closed-form loss values", closed_forms),
        ("structural invariants", invariants),
        ("oracle equivalence", oracles),
        ("end-to-end learning", end_to_end),
        ("ablation harness", ablations),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {verdict}  {name}: {} ({:.1} s)",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

// ---------------------------------------------------------------- gradients

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every input
/// entry, with central differences of step `h`.
fn gradient_error(inputs: &[Matrix], f: &dyn Fn(&Tape, &[Var]) -> Var) -> f64 {
    let t = Tape::new(BlockSet::empty());
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    let loss = f(&t, &vars);
    let grads = t.backward(loss);
    let eval = |ms: &[Matrix]| {
        let t = Tape::new(BlockSet::empty());
        let vs: Vec<Var> = ms.iter().map(|m| t.constant(m.clone())).collect();
        let v = f(&t, &vs);
        t.scalar(v)
    };
    let h = 1e-5;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}

fn random_annotations(rng: &mut ChaCha8Rng, l: usize, classes: usize) -> Vec<SegmentAnnotation> {
    let s = rng.random_range(0..l - 1);
    let e = rng.random_range(s + 1..=l);
    let mut anns = vec![SegmentAnnotation::new(s as f64, e as f64, rng.random_range(0..classes))];
    if e + 1 < l {
        let s2 = rng.random_range(e + 1..l);
        anns.push(SegmentAnnotation::new(
            s2 as f64,
            l as f64,
            rng.random_range(0..classes),
        ));
    }
    anns
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let per_loss = 20;

    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };

    for _ in 0..per_loss {
        let (d, l, c) = (
            rng.random_range(2..=8),
            rng.random_range(2..=8),
            rng.random_range(1..=4),
        );
        let tau = 0.7;
        let labels: Vec<usize> = (0..l).map(|_| rng.random_range(0..=c)).collect();
        let inputs = [random_matrix(&mut rng, l, d), random_matrix(&mut rng, c + 1, d)];
        let err = gradient_error(&inputs, &|t, v| {
            let protos = t.normalize_rows(v[1], 1e-12);
            let p = classify_snippets(t, v[0], protos, tau).unwrap();
            loss_classification(t, p, &labels).unwrap()
        });
        record("L_c", err);
    }
    for _ in 0..per_loss {
        let l = rng.random_range(4..=8);
        let anns = random_annotations(&mut rng, l, 2);
        let targets = mask_targets(&anns, |c| c == 0 || c == 1, l);
        let logits = random_matrix(&mut rng, l, l);
        let dice = gradient_error(std::slice::from_ref(&logits), &|t, v| {
            loss_mask(t, t.sigmoid(v[0]), &targets).unwrap().0
        });
        let bce = gradient_error(std::slice::from_ref(&logits), &|t, v| {
            loss_mask(t, t.sigmoid(v[0]), &targets).unwrap().1
        });
        record("L_m", dice);
        record("L_comp", bce);
    }
    for _ in 0..per_loss {
        let (d, c) = (rng.random_range(2..=8), rng.random_range(1..=4));
        let inputs = [
            random_matrix(&mut rng, c, d),
            random_matrix(&mut rng, c, d),
            random_matrix(&mut rng, c, d),
        ];
        let err = gradient_error(&inputs, &|t, v| loss_token_contrastive(t, v[0], v[1], v[2]).unwrap());
        record("L_tok", err);
    }
    for _ in 0..per_loss {
        let (d, c) = (rng.random_range(2..=8), rng.random_range(1..=4));
        let delta = rng.random_range(-0.5..0.5);
        let inputs = [random_matrix(&mut rng, 1, d), random_matrix(&mut rng, c, d)];
        let err = gradient_error(&inputs, &|t, v| loss_background(t, v[0], v[1], delta).unwrap());
        record("L_bg", err);
    }
    let pass = worst.iter().all(|w| w.1 < 1e-4);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        pass,
        detail: format!("worst relative error over {per_loss} instances each: {detail}"),
    }
}

// ------------------------------------------------------------- closed forms

fn closed_forms() -> Outcome {
    let mut worst_ce: f64 = 0.0;
    for c in 1..=12 {
        let l = 7;
        let t = Tape::new(BlockSet::empty());
        let p = t.constant(Matrix::filled(l, c + 1, 1.0 / (c + 1) as f64));
        let labels: Vec<usize> = (0..l).map(|i| i % (c + 1)).collect();
        let v = t.scalar(loss_classification(&t, p, &labels).unwrap());
        worst_ce = worst_ce.max((v - ((c + 1) as f64).ln()).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_tok: f64 = 0.0;
    let mut worst_bg: f64 = 0.0;
    for _ in 0..20 {
        let (c, d) = (rng.random_range(1..=5), rng.random_range(2..=8));
        let base = random_matrix(&mut rng, c, d);
        let t = Tape::new(BlockSet::empty());
        let scaled = |s: f64| t.constant(base.scale(s));
        let v = t.scalar(loss_token_contrastive(&t, scaled(1.0), scaled(2.0), scaled(0.5)).unwrap());
        worst_tok = worst_tok.max((v - 3f64.ln()).abs());

        // Orthonormal classes; the unit background has cosine delta with each.
        let delta: f64 = rng.random_range(-0.44..0.44);
        let classes = Matrix::from_fn(c, c + 1, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        let mut bg = vec![delta; c + 1];
        bg[0] = (1.0 - c as f64 * delta * delta).sqrt();
        let v = t.scalar(loss_background(&t, t.constant(Matrix::row_vector(&bg)), t.constant(classes), delta).unwrap());
        worst_bg = worst_bg.max(v.abs());
    }
    Outcome {
        pass: worst_ce < 1e-6 && worst_tok < 1e-6 && worst_bg < 1e-12,
        detail: format!("|CE - ln(C+1)| {worst_ce:.1e}, |L_tok - ln 3| {worst_tok:.1e}, |L_bg| {worst_bg:.1e}"),
    }
}

// --------------------------------------------------------------- invariants

fn small_dataset(seed: u64) -> Dataset {
    generate_synthetic_dataset(
        &SynthConfig {
            num_classes: 6,
            videos_per_class: 4,
            min_snippets: 12,
            max_snippets: 20,
            feature_dim: 8,
            split: SplitRatios {
                base: 0.5,
                validation: 0.17,
                novel: 0.33,
            },
            ..SynthConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        snippets: 16,
        heads: 2,
        adapter_rank: 4,
        num_queries: 4,
        ..ModelConfig::default()
    }
}

fn invariants() -> Outcome {
    let ds = small_dataset(3);
    let model = Model::for_dataset(small_model_config(), &ds, 1).unwrap();
    let mut col_err: f64 = 0.0;
    let mut row_err: f64 = 0.0;
    let mut rows_ok = true;
    for i in 0..10u64 {
        let ep = sample_episode(
            &ds.videos,
            &ds.class_names,
            &ds.split.novel,
            2,
            1,
            &mut episode_rng(9, i),
        )
        .unwrap();
        let data = EpisodeData::new(&ep, &ds.videos);
        for mode in [Mode::Fs, Mode::Mmfs] {
            let t = Tape::new(BlockSet::empty());
            let out = model
                .forward_episode(&t, &data, ForwardOptions::inference(mode))
                .unwrap();
            let e = t.value(out.prototypes).clone();
            rows_ok &= e.rows() == ep.ways() + 1;
            for r in 0..e.rows() {
                let n = e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                row_err = row_err.max((n - 1.0).abs());
            }
            for q in &out.queries {
                let p = ClassProbMap::from_snippet_major(&t.value(q.probs), model.config.tau);
                for col in 0..p.snippets() {
                    let s: f64 = p.probs.column(col).iter().sum();
                    col_err = col_err.max((s - 1.0).abs());
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut perm_err: f64 = 0.0;
    for kind in [TokenizerKind::SetAttention, TokenizerKind::Cnn1d] {
        let cfg = ModelConfig {
            tokenizer: kind,
            tokens_per_class: 3,
            ..small_model_config()
        };
        let mut store = ParamStore::new();
        let tok = SemanticsTokenizer::new(&mut store, &cfg, &mut rng);
        let shots: Vec<Matrix> = (0..5)
            .map(|_| {
                let len = rng.random_range(6..12);
                random_matrix(&mut rng, len, cfg.dim)
            })
            .collect();
        let masks: Vec<Vec<bool>> = shots
            .iter()
            .map(|s| {
                let mut m: Vec<bool> = (0..s.rows()).map(|_| rng.random_bool(0.5)).collect();
                m[0] = true;
                m
            })
            .collect();
        let run = |order: &[usize]| {
            let t = Tape::new(BlockSet::empty());
            let vs: Vec<Var> = order.iter().map(|&k| t.constant(shots[k].clone())).collect();
            let ms: Vec<Vec<bool>> = order.iter().map(|&k| masks[k].clone()).collect();
            let w = tok.tokenize_support(&t, &store, &vs, &ms).unwrap();
            let v = t.value(w).clone();
            v
        };
        let reference = run(&[0, 1, 2, 3, 4]);
        let mut order: Vec<usize> = (0..5).collect();
        for _ in 0..100 {
            order.shuffle(&mut rng);
            perm_err = perm_err.max(run(&order).max_abs_diff(&reference));
        }
    }

    let mut adapter_err: f64 = 0.0;
    let mut store = ParamStore::new();
    for s in 0..50 {
        let dim = rng.random_range(2..=16);
        let rank = rng.random_range(1..=dim);
        let a = AdapterUnit::new(&mut store, &format!("a{s}"), dim, rank, &mut rng);
        let rows = rng.random_range(1..10);
        let x = random_matrix(&mut rng, rows, dim).scale(10.0);
        let t = Tape::new(BlockSet::empty());
        let y = a.forward(&t, &store, t.constant(x.clone()));
        adapter_err = adapter_err.max(t.value(y).max_abs_diff(&x));
    }

    let mut label_invariant = true;
    let mut base_sensitive = false;
    for i in 0..10u64 {
        let ep = sample_episode(
            &ds.videos,
            &ds.class_names,
            &ds.split.base,
            2,
            1,
            &mut episode_rng(21, i),
        )
        .unwrap();
        let data = EpisodeData::new(&ep, &ds.videos);
        let mut perm: Vec<usize> = (0..ds.num_classes()).collect();
        perm.shuffle(&mut rng);
        let mut relabeled: Vec<_> = data.queries.iter().map(|v| (*v).clone()).collect();
        for v in &mut relabeled {
            for a in &mut v.annotations {
                a.class_id = perm[a.class_id];
            }
        }
        let other = EpisodeData {
            queries: relabeled.iter().collect(),
            ..data.clone()
        };
        let t = Tape::new(BlockSet::empty());
        let loss = |d: &EpisodeData<'_>, stage| episode_loss(&model, &t, d, stage, Mode::Mmfs, 0.1).unwrap().1.total;
        label_invariant &= loss(&data, Stage::Meta).to_bits() == loss(&other, Stage::Meta).to_bits();
        base_sensitive |= loss(&data, Stage::Base) != loss(&other, Stage::Base);
    }

    Outcome {
        pass: col_err < 1e-6
            && rows_ok
            && row_err < 1e-9
            && perm_err < 1e-6
            && adapter_err == 0.0
            && label_invariant
            && base_sensitive,
        detail: format!(
            "P column sums {col_err:.1e}, E_mm C+1 rows {rows_ok} with norm error {row_err:.1e}, \
             tokenizer permutation {perm_err:.1e}, adapter identity {adapter_err:.1e}, \
             stage-2 label invariance {label_invariant} (stage 1 sensitive {base_sensitive})"
        ),
    }
}

// ------------------------------------------------------------------ oracles

/// Soft-NMS by exhaustive search: the unique processing order in which
/// every kept detection outscores all later ones at the time it is kept.
fn soft_nms_reference(dets: &[Detection], sigma: f64, floor: f64) -> Vec<Detection> {
    let dets: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= floor).collect();
    let n = dets.len();
    let mut best: Option<Vec<Detection>> = None;
    let mut order: Vec<usize> = (0..n).collect();
    permute(&mut order, 0, &mut |order| {
        let decay = |i: usize, upto: usize| -> f64 {
            order[..upto]
                .iter()
                .filter(|&&j| dets[j].class_id == dets[i].class_id)
                .map(|&j| {
                    let iou = segment_iou((dets[j].start, dets[j].end), (dets[i].start, dets[i].end));
                    (-iou * iou / sigma).exp()
                })
                .product::<f64>()
        };
        for k in 0..n {
            let mine = dets[order[k]].score * decay(order[k], k);
            if order[k + 1..].iter().any(|&m| dets[m].score * decay(m, k) > mine) {
                return;
            }
        }
        let out = (0..n)
            .map(|k| Detection {
                score: dets[order[k]].score * decay(order[k], k),
                ..dets[order[k]]
            })
            .take_while(|d| d.score >= floor)
            .collect();
        best = Some(out);
    });
    best.expect("a greedy order always exists")
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

fn random_segment(rng: &mut ChaCha8Rng, len: f64) -> (f64, f64) {
    let a = rng.random_range(0.0..len - 1.0);
    let b = rng.random_range(a + 0.5..len);
    (a, b)
}

/// AP by recomputing the greedy matching of every ranked prefix from
/// scratch and integrating the interpolated precision over recall levels.
fn brute_force_ap(preds: &[(String, Detection)], gt: &[VideoGroundTruth], class: usize, tiou: f64) -> Option<f64> {
    let total: usize = gt
        .iter()
        .map(|v| v.annotations.iter().filter(|a| a.class_id == class).count())
        .sum();
    if total == 0 {
        return None;
    }
    let mut ranked: Vec<&(String, Detection)> = preds.iter().filter(|p| p.1.class_id == class).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let tp_of_prefix = |k: usize| {
        let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut tp = 0;
        for (vid, d) in &ranked[..k] {
            let mut best: Option<((usize, usize), f64)> = None;
            for (vi, v) in gt.iter().enumerate().filter(|(_, v)| &v.video_id == vid) {
                for (ai, a) in v.annotations.iter().enumerate() {
                    if a.class_id != class || used.contains(&(vi, ai)) {
                        continue;
                    }
                    let iou = segment_iou((d.start, d.end), (a.start, a.end));
                    if iou >= tiou && best.is_none_or(|b| iou > b.1) {
                        best = Some(((vi, ai), iou));
                    }
                }
            }
            if let Some((key, _)) = best {
                used.insert(key);
                tp += 1;
            }
        }
        tp
    };
    let points: Vec<(f64, usize)> = (1..=ranked.len())
        .map(|k| {
            let tp = tp_of_prefix(k);
            (tp as f64 / k as f64, tp)
        })
        .collect();
    let ap = (1..=total)
        .map(|level| points.iter().filter(|p| p.1 >= level).map(|p| p.0).fold(0.0, f64::max))
        .sum::<f64>()
        / total as f64;
    Some(ap)
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut nms_err: f64 = 0.0;
    let mut nms_mismatch = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=6);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (s, e) = random_segment(&mut rng, 12.0);
                Detection::new(s, e, rng.random_range(0..2), rng.random_range(0.0..1.0))
            })
            .collect();
        let sigma = [0.1, 0.5, 1.0][case % 3];
        let floor = [0.0, 0.001, 0.2][case % 3];
        let got = soft_nms(&dets, sigma, floor).unwrap();
        let want = soft_nms_reference(&dets, sigma, floor);
        if got.len() != want.len() {
            nms_mismatch += 1;
            continue;
        }
        for (g, w) in got.iter().zip(&want) {
            if (g.start, g.end, g.class_id) != (w.start, w.end, w.class_id) {
                nms_mismatch += 1;
            }
            nms_err = nms_err.max((g.score - w.score).abs());
        }
    }

    let grid = [0.3, 0.5, 0.7];
    let mut map_err: f64 = 0.0;
    for _ in 0..100 {
        let videos = rng.random_range(1..=3);
        let gt: Vec<VideoGroundTruth> = (0..videos)
            .map(|v| VideoGroundTruth {
                video_id: format!("v{v}"),
                annotations: (0..rng.random_range(0..=4))
                    .map(|_| {
                        let (s, e) = random_segment(&mut rng, 20.0);
                        SegmentAnnotation::new(s, e, rng.random_range(0..3))
                    })
                    .collect(),
            })
            .collect();
        let mut flat = Vec::new();
        let sets: Vec<DetectionSet> = (0..videos)
            .map(|v| {
                let segments: Vec<Detection> = (0..rng.random_range(0..=8))
                    .map(|_| {
                        // Predictions near a ground-truth segment half the time.
                        let (s, e) = match gt[v].annotations.first() {
                            Some(a) if rng.random_bool(0.5) => (
                                a.start + rng.random_range(-1.0..1.0),
                                a.end + rng.random_range(-1.0..1.0),
                            ),
                            _ => random_segment(&mut rng, 20.0),
                        };
                        let (s, e) = (s.max(0.0), e.max(s.max(0.0) + 0.1));
                        Detection::new(s, e, rng.random_range(0..3), rng.random_range(0.0..1.0))
                    })
                    .collect();
                flat.extend(segments.iter().map(|d| (format!("v{v}"), *d)));
                DetectionSet {
                    video_id: format!("v{v}"),
                    segments,
                }
            })
            .collect();
        let classes = [0, 1, 2];
        let got = evaluate_map(&sets, &gt, &classes, &grid);
        for (i, &th) in grid.iter().enumerate() {
            let aps: Vec<f64> = classes
                .iter()
                .filter_map(|&c| brute_force_ap(&flat, &gt, c, th))
                .collect();
            let want = if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            };
            map_err = map_err.max((got.map[i] - want).abs());
        }
    }

    let golden = [
        ((0.0, 10.0), (5.0, 15.0), 1.0 / 3.0),
        ((0.0, 10.0), (0.0, 10.0), 1.0),
        ((0.0, 4.0), (1.0, 2.0), 0.25),
        ((0.0, 1.0), (1.0, 2.0), 0.0),
        ((0.0, 1.0), (3.0, 4.0), 0.0),
        ((2.0, 6.0), (4.0, 10.0), 0.25),
        ((0.0, 3.0), (1.0, 4.0), 0.5),
        ((1.5, 2.5), (2.0, 3.0), 0.5 / 1.5),
    ];
    let iou_ok = golden
        .iter()
        .all(|&(a, b, want)| (segment_iou(a, b) - want).abs() < 1e-12 && (segment_iou(b, a) - want).abs() < 1e-12);

    Outcome {
        pass: nms_mismatch == 0 && nms_err < 1e-9 && map_err < 1e-9 && iou_ok,
        detail: format!(
            "soft-nms 1000 cases: {nms_mismatch} mismatches, score error {nms_err:.1e}; \
             mAP 100 cases: error {map_err:.1e}; IoU golden table {}",
            if iou_ok { "ok" } else { "wrong" }
        ),
    }
}

// ------------------------------------------------------------ end to end

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let ds = generate_synthetic_dataset(&cfg.dataset.synthetic, cfg.seed).unwrap();
    let eval = |m: &Model, mode| {
        let e = EvalConfig {
            mode,
            episodes: 100,
            tiou_grid: vec![0.3, 0.5, 0.7],
            workers: workers(),
            ..EvalConfig::default()
        };
        run_protocol(m, &ds, &e, cfg.seed).unwrap().average
    };
    let mut model = Model::for_dataset(cfg.model.clone(), &ds, cfg.seed).unwrap();
    let untrained_mmfs = eval(&model, Mode::Mmfs);
    let untrained_fs = eval(&model, Mode::Fs);
    let untrained = untrained_mmfs.max(untrained_fs);
    base_train(&mut model, &ds, &cfg.training, cfg.seed, &mut |_| {}).unwrap();
    meta_train(&mut model, &ds, &cfg.training, cfg.seed, &mut |_| {}).unwrap();
    let mmfs = eval(&model, Mode::Mmfs);
    let fs = eval(&model, Mode::Fs);
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: mmfs > 3.0 * untrained_mmfs && mmfs >= fs && fs >= untrained && secs < 600.0,
        detail: format!(
            "novel avg mAP@{{0.3,0.5,0.7}} over 100 episodes: untrained MMFS {:.2} / FS {:.2}, \
             trained MMFS {:.2} / FS {:.2} ({} base steps, {} meta episodes, {secs:.0} s of 600)",
            100.0 * untrained_mmfs,
            100.0 * untrained_fs,
            100.0 * mmfs,
            100.0 * fs,
            cfg.training.base_steps,
            cfg.training.meta_episodes
        ),
    }
}

// ---------------------------------------------------------------- ablations

fn ablation_base() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 13,
        ..ExperimentConfig::default()
    };
    cfg.dataset.synthetic = SynthConfig {
        num_classes: 8,
        videos_per_class: 5,
        min_snippets: 20,
        max_snippets: 32,
        feature_dim: 16,
        split: SplitRatios {
            base: 0.5,
            validation: 0.125,
            novel: 0.375,
        },
        ..cfg.dataset.synthetic
    };
    cfg.model = ModelConfig {
        dim: 16,
        snippets: 24,
        heads: 2,
        adapter_rank: 4,
        num_queries: 4,
        ..ModelConfig::default()
    };
    cfg.training.base_steps = 15;
    cfg.training.meta_episodes = 5;
    cfg.training.ways = 2;
    cfg.training.shots = 1;
    cfg.eval = EvalConfig {
        ways: 2,
        shots: 1,
        episodes: 6,
        tiou_grid: vec![0.3, 0.5, 0.7],
        workers: workers(),
        ..EvalConfig::default()
    };
    cfg
}

type Variant = (&'static str, fn(&mut ExperimentConfig));

fn ablation_variants() -> Vec<Variant> {
    vec![
        ("default", |_| {}),
        ("class-generic prompts", |c| {
            c.model.context_scope = ContextScope::ClassGeneric
        }),
        ("cnn tokenizer", |c| c.model.tokenizer = TokenizerKind::Cnn1d),
        ("20 tokens per class", |c| c.model.tokens_per_class = 20),
        ("frozen encoder", |c| c.model.encoder_mode = EncoderMode::Frozen),
        ("full fine-tune", |c| c.model.encoder_mode = EncoderMode::FullTune),
        ("no query masking", |c| c.model.query_regulation = false),
        ("unmasked decoder attention", |c| {
            c.model.mask_decoder = MaskDecoderKind::Attention
        }),
        ("learnable visual prompt", |c| {
            c.model.prompt_design = PromptDesign::LearnableVisual
        }),
        ("learnable text prompt", |c| {
            c.model.prompt_design = PromptDesign::LearnableText
        }),
        ("meta: encoder only", |c| {
            c.training.meta_learn = MetaLearnFlags {
                encoder: true,
                ..MetaLearnFlags::none()
            }
        }),
        ("meta: tokenizer only", |c| {
            c.training.meta_learn = MetaLearnFlags {
                tokenizer: true,
                ..MetaLearnFlags::none()
            }
        }),
        ("meta: temporal + decoder", |c| {
            c.training.meta_learn = MetaLearnFlags {
                temporal: true,
                decoder: true,
                ..MetaLearnFlags::none()
            }
        }),
    ]
}

fn train_and_eval(cfg: &ExperimentConfig, ds: &Dataset) -> mmfs_core::Result<(Model, EvalReport)> {
    let mut model = Model::for_dataset(cfg.model.clone(), ds, cfg.seed)?;
    base_train(&mut model, ds, &cfg.training, cfg.seed, &mut |_| {})?;
    meta_train(&mut model, ds, &cfg.training, cfg.seed, &mut |_| {})?;
    let report = run_protocol(&model, ds, &cfg.eval, cfg.seed)?;
    Ok((model, report))
}

fn ablations() -> Outcome {
    let base = ablation_base();
    let ds = generate_synthetic_dataset(&base.dataset.synthetic, base.seed).unwrap();
    let mut failures = Vec::new();
    let mut scores = Vec::new();
    for (name, apply) in ablation_variants() {
        let mut cfg = base.clone();
        apply(&mut cfg);
        match train_and_eval(&cfg, &ds) {
            Ok((_, r)) if r.map.len() == 3 && r.average.is_finite() && r.episodes == cfg.eval.episodes => {
                scores.push(format!("{name} {:.1}", 100.0 * r.average));
            }
            Ok(_) => failures.push(format!("{name}: malformed report")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{} variants reported [{}]", scores.len(), scores.join(", "))
        } else {
            failures.join("; ")
        },
    }
}

// -------------------------------------------------------------- determinism

fn pipeline_once(cfg: &ExperimentConfig) -> (Vec<u8>, String) {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_synthetic_dataset(&cfg.dataset.synthetic, cfg.seed).unwrap();
    save_dataset(dir.path(), &generated).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let (model, report) = train_and_eval(cfg, &ds).unwrap();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        stages: vec![Stage::Base, Stage::Meta],
        model,
    };
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    let again = run_protocol(&reloaded.model, &ds, &cfg.eval, cfg.seed).unwrap();
    assert_eq!(again, report, "reloaded checkpoint evaluates differently");
    (bytes, serde_json::to_string(&report).unwrap())
}

fn determinism() -> Outcome {
    let mut cfg = ablation_base();
    let (ck_a, rep_a) = pipeline_once(&cfg);
    let (ck_b, rep_b) = pipeline_once(&cfg);
    cfg.eval.workers = 1;
    let (ck_c, rep_c) = pipeline_once(&cfg);
    let same = ck_a == ck_b && rep_a == rep_b && ck_a == ck_c && rep_a == rep_c;
    Outcome {
        pass: same,
        detail: format!(
            "two runs: checkpoints {} ({} bytes), reports {}; single-worker rerun {}",
            if ck_a == ck_b { "identical" } else { "differ" },
            ck_a.len(),
            if rep_a == rep_b { "identical" } else { "differ" },
            if ck_a == ck_c && rep_a == rep_c {
                "identical"
            } else {
                "differs"
            }
        ),
    }
}
