//! Acceptance gate: one test per shipped guarantee, each ending in a single
//! `PASS` line with its runtime (visible under `--nocapture`). The heavyweight
//! end-to-end criteria (06–08) share one synthesized dataset and training run
//! through a lazily initialized fixture, so the binary is exercised exactly
//! the way the README describes while the suite stays inside its budgets.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nightseg::data::{augment, AugConfig, LabelMap, IGNORE_LABEL};
use nightseg::gradcheck::{
    check_input_gradient, check_param_gradients, probe_weights, weighted_sum, FD_EPSILON,
};
use nightseg::hrseg::{SegConfig, SegNet};
use nightseg::metrics::{mean_iou, ConfusionMatrix, REFERENCE_ROWS};
use nightseg::netcore::{
    conv_output_shape, softmax_channels, transconv_output_shape, ConvSpec, Mode, SnapshotExt,
};
use nightseg::relight::{RelightConfig, RelightNet};
use nightseg::training::{
    cross_entropy_loss, AdaptConfig, Checkpoint, DatasetSpec, TrainConfig, TrainState,
};
use nightseg::{TensorImage, TensorShape};

fn pass(name: &str, t0: Instant) {
    println!("acceptance {name}: PASS ({:.2}s)", t0.elapsed().as_secs_f64());
}

fn budget(name: &str, t0: Instant, seconds: f64) {
    let took = t0.elapsed().as_secs_f64();
    assert!(took < seconds, "{name} took {took:.1}s, budget {seconds}s");
}

fn rand_image<T: nightseg::Scalar>(shape: (usize, usize, usize, usize), seed: u64) -> TensorImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorImage::from_shape_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

fn label_map(values: Array2<u8>) -> LabelMap {
    LabelMap::new(values).expect("values stay inside the label alphabet")
}

// ---------------------------------------------------------------------------
// 01: per-class IoU and mIoU against a brute-force oracle, exactly.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_metric_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
    for _ in 0..1000 {
        let gt = Array2::from_shape_fn((8, 8), |_| {
            if rng.gen_bool(0.1) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..19u8)
            }
        });
        let pred = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..19u8));

        let mut conf = ConfusionMatrix::new(19);
        conf.update(&label_map(pred.clone()), &label_map(gt.clone()))
            .unwrap();
        let got = conf.iou_per_class();

        // Brute force straight from the definition: sets of pixel positions,
        // ignore removed first, integer counts.
        let mut oracle = Vec::with_capacity(19);
        for c in 0..19u8 {
            let mut inter = 0u64;
            let mut union = 0u64;
            for (g, p) in gt.iter().zip(pred.iter()) {
                if *g == IGNORE_LABEL {
                    continue;
                }
                if *g == c && *p == c {
                    inter += 1;
                }
                if *g == c || *p == c {
                    union += 1;
                }
            }
            oracle.push((union > 0).then(|| inter as f64 / union as f64));
        }
        assert_eq!(got, oracle, "per-class IoU differs from the oracle");

        let present: Vec<f64> = oracle.iter().flatten().copied().collect();
        let oracle_mean = present.iter().sum::<f64>() / present.len() as f64;
        assert_eq!(mean_iou(&got).unwrap(), oracle_mean);
    }
    budget("01", t0, 10.0);
    pass("01 metric-oracle-equivalence", t0);
}

// ---------------------------------------------------------------------------
// 02: the bundled per-class reference rows reproduce their printed means.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_reference_table_consistency() {
    let t0 = Instant::now();
    for row in &REFERENCE_ROWS {
        let mean = row.per_class_percent.iter().sum::<f64>() / 19.0;
        let gap = (mean - row.printed_miou).abs();
        assert!(
            gap < 0.35,
            "{}: row mean {mean:.3} vs printed {} (gap {gap:.3})",
            row.label,
            row.printed_miou
        );
    }
    budget("02", t0, 1.0);
    pass("02 reference-table-consistency", t0);
}

// ---------------------------------------------------------------------------
// 03: analytic gradients against central finite differences (f64).
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_gradient_checks() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0003);

    // (a) Cross-entropy on 2x3x4x4 logits, a few pixels ignored.
    let logits = rand_image::<f64>((2, 3, 4, 4), 31);
    let labels: Vec<LabelMap> = (0..2)
        .map(|_| {
            label_map(Array2::from_shape_fn((4, 4), |_| {
                if rng.gen_bool(0.15) {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..3u8)
                }
            }))
        })
        .collect();
    let ce = cross_entropy_loss(&logits, &labels).unwrap();
    let report = check_input_gradient(
        &logits,
        &ce.grad,
        |lp| cross_entropy_loss(lp, &labels).unwrap().loss,
        FD_EPSILON,
        96,
        &mut rng,
    );
    report.assert_below(1e-4);

    // (b) Relighting net on a single 3x4x4 image. Eval mode: with one sample
    // the 1x1 bottleneck leaves batch statistics degenerate, and eval-mode
    // forwards are pure, so every finite-difference evaluation starts from
    // the same state.
    let rcfg = RelightConfig {
        base_channels: 2,
        num_res_blocks: 1,
        zero_init_last: false,
    };
    // One training-mode pass first: fresh running statistics (mean exactly
    // zero) would map upstream rectifier zeros exactly onto downstream
    // rectifier corners, where the two one-sided derivatives disagree and a
    // difference quotient measures neither. Generic statistics break the
    // alignment.
    let mut rnet = RelightNet::<f64>::new(&rcfg, 33).unwrap();
    rnet.forward(&rand_image::<f64>((2, 3, 4, 4), 97), Mode::Train, false)
        .unwrap();
    let x = rand_image::<f64>((1, 3, 4, 4), 34);
    let y = rnet.forward(&x, Mode::Eval, true).unwrap();
    let probe = probe_weights::<f64>(y.dim(), &mut rng);
    rnet.zero_grads();
    rnet.backward(&probe);
    let report = check_param_gradients(
        &mut rnet,
        |n| weighted_sum(&n.forward(&x, Mode::Eval, false).unwrap(), &probe),
        FD_EPSILON,
        4,
        &mut rng,
    );
    report.assert_below(1e-3);

    // (c) Reduced segmentation net on 1x3x32x32, at least 200 sampled
    // parameters across every stage, eval mode for the same reason.
    let scfg = SegConfig {
        stem_channels: 4,
        branch_channels: [4, 8, 16, 32],
        blocks_per_branch: 1,
        modules_per_stage: [1, 1, 1, 1],
        head_mid_channels: 8,
        num_classes: 5,
    };
    let mut snet = SegNet::<f64>::new(&scfg, 35).unwrap();
    snet.forward(&rand_image::<f64>((2, 3, 32, 32), 98), Mode::Train, false)
        .unwrap();
    let x = rand_image::<f64>((1, 3, 32, 32), 36);
    let y = snet.forward(&x, Mode::Eval, true).unwrap();
    let probe = probe_weights::<f64>(y.dim(), &mut rng);
    snet.zero_grads();
    snet.backward(&probe);
    let report = check_param_gradients(
        &mut snet,
        |n| weighted_sum(&n.forward(&x, Mode::Eval, false).unwrap(), &probe),
        FD_EPSILON,
        2,
        &mut rng,
    );
    assert!(report.checked >= 200, "only {} parameters sampled", report.checked);
    report.assert_below(1e-3);

    budget("03", t0, 300.0);
    pass("03 gradient-checks", t0);
}

// ---------------------------------------------------------------------------
// 04: zero-initialized relighting is the exact identity at initialization.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_relight_identity_at_init() {
    let t0 = Instant::now();
    let cfg = RelightConfig {
        base_channels: 8,
        num_res_blocks: 2,
        zero_init_last: true,
    };
    let mut net = RelightNet::<f32>::new(&cfg, 41).unwrap();
    for i in 0..10u64 {
        let x = rand_image::<f32>((1, 3, 16, 16), 42 + i);
        let y = net.forward(&x, Mode::Eval, false).unwrap();
        let max_dev = y
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max_dev, 0.0, "input {i} not reproduced exactly");
    }
    budget("04", t0, 10.0);
    pass("04 relight-identity-at-init", t0);
}

// ---------------------------------------------------------------------------
// 05: output and internal branch shapes across input sizes, plus the
// closed-form convolution geometry.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_shape_suite() {
    let t0 = Instant::now();
    let cfg = SegConfig {
        stem_channels: 4,
        branch_channels: [4, 8, 16, 32],
        blocks_per_branch: 1,
        modules_per_stage: [1, 1, 1, 1],
        head_mid_channels: 8,
        num_classes: 19,
    };
    let mut net = SegNet::<f32>::new(&cfg, 51).unwrap();
    for &h in &[32usize, 64, 96] {
        for &w in &[32usize, 64, 96] {
            let b = if (h, w) == (64, 96) { 2 } else { 1 };
            let x = TensorImage::<f32>::zeros((b, 3, h, w));
            let branches = net.forward_branches(&x, Mode::Eval, false).unwrap();
            assert_eq!(branches.len(), 4);
            for (i, feat) in branches.iter().enumerate() {
                let div = 4 << i; // resolution ladder: 1/4, 1/8, 1/16, 1/32
                assert_eq!(feat.dim(), (b, cfg.branch_channels[i], h / div, w / div));
            }
            let y = net.forward(&x, Mode::Eval, false).unwrap();
            assert_eq!(y.dim(), (b, 19, h, w));
        }
    }

    // floor((in + 2p - k) / s) + 1 for convolutions...
    let shp = |c, h, w| TensorShape { batch: 1, channels: c, height: h, width: w };
    let got = conv_output_shape(shp(3, 96, 96), &ConvSpec::conv(3, 8, 3, 2, 1)).unwrap();
    assert_eq!((got.height, got.width), (48, 48));
    let got = conv_output_shape(shp(8, 33, 47), &ConvSpec::conv(8, 8, 3, 2, 1)).unwrap();
    assert_eq!((got.height, got.width), (17, 24));
    let got = conv_output_shape(shp(4, 32, 32), &ConvSpec::conv(4, 6, 1, 1, 0)).unwrap();
    assert_eq!((got.channels, got.height, got.width), (6, 32, 32));
    // ...and (in - 1)s - 2p + k for transposed ones.
    let got = transconv_output_shape(shp(16, 16, 16), &ConvSpec::transposed(16, 8, 4, 2, 1)).unwrap();
    assert_eq!((got.channels, got.height, got.width), (8, 32, 32));
    let got = transconv_output_shape(shp(16, 9, 13), &ConvSpec::transposed(16, 8, 2, 2, 0)).unwrap();
    assert_eq!((got.height, got.width), (18, 26));

    budget("05", t0, 60.0);
    pass("05 shape-suite", t0);
}

// ---------------------------------------------------------------------------
// Shared fixture for the end-to-end criteria: synthesize the demo dataset and
// complete one training run with the stock demo config, through the real
// binary.
// ---------------------------------------------------------------------------

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    train_secs: f64,
    eval_miou: f64,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn run_cli(root: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_nightseg"))
        .args(args)
        .current_dir(root)
        .output()
        .expect("spawning the nightseg binary");
    assert!(
        out.status.success(),
        "`nightseg {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let config = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs/synthetic-demo.toml")
            .canonicalize()
            .expect("demo config present in the repository");
        let config_arg = config.to_str().unwrap().to_owned();

        run_cli(
            &root,
            &["synth", "--out", "data/synthetic", "--pairs", "16", "--size", "64", "--classes", "4", "--night"],
        );

        let t0 = Instant::now();
        run_cli(&root, &["train", "--config", &config_arg, "--run-dir", "run-a"]);
        let train_secs = t0.elapsed().as_secs_f64();

        // The demo config evaluates on the split it trained on; the eval
        // command re-measures that from the saved checkpoint.
        run_cli(
            &root,
            &["eval", "--checkpoint", "run-a/final.ckpt", "--json", "eval-a.json"],
        );
        let eval_miou = read_json(&root.join("eval-a.json"))["miou"]
            .as_f64()
            .expect("miou field");

        Pipeline { _dir: dir, root, config, train_secs, eval_miou }
    })
}

// ---------------------------------------------------------------------------
// 06: the documented synth → train → eval flow memorizes the tiny set.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_overfit_acceptance() {
    let t0 = Instant::now();
    let p = pipeline();
    assert!(
        p.train_secs < 600.0,
        "training took {:.1}s, budget 600s",
        p.train_secs
    );
    assert!(
        p.eval_miou >= 0.85,
        "train-split mIoU {:.4} below the 0.85 bar",
        p.eval_miou
    );
    println!("  train {:.1}s, train-split mIoU {:.4}", p.train_secs, p.eval_miou);
    pass("06 overfit-acceptance", t0);
}

// ---------------------------------------------------------------------------
// 07: the same run twice is bitwise identical — checkpoints and logs.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_run_determinism() {
    let t0 = Instant::now();
    let p = pipeline();
    run_cli(
        &p.root,
        &["train", "--config", p.config.to_str().unwrap(), "--run-dir", "run-b"],
    );
    for file in ["final.ckpt", "best.ckpt", "train.ndjson", "eval.json", "config.toml"] {
        let a = std::fs::read(p.root.join("run-a").join(file)).unwrap();
        let b = std::fs::read(p.root.join("run-b").join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
    pass("07 run-determinism", t0);
}

// ---------------------------------------------------------------------------
// 08: the ablation report is recomputable from its own run logs, and both
// arms consumed the same sample order.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_ablation_harness() {
    let t0 = Instant::now();
    let p = pipeline();
    run_cli(
        &p.root,
        &["ablate", "--config", p.config.to_str().unwrap(), "--run-dir", "ablation"],
    );
    let report = read_json(&p.root.join("ablation/ablation.json"));

    let mut end_records = Vec::new();
    for arm in ["with_relight", "without_relight"] {
        let log = std::fs::read_to_string(p.root.join("ablation").join(arm).join("train.ndjson"))
            .unwrap();
        let end: serde_json::Value = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .find(|v: &serde_json::Value| v["event"] == "end")
            .expect("end record in the run log");

        // The report's numbers must be exactly the ones in the arm's log.
        assert_eq!(report[arm]["miou"], end["final_miou"], "{arm} mIoU");
        assert_eq!(
            report[arm]["sample_order_hash"], end["sample_order_hash"],
            "{arm} sample order"
        );
        end_records.push(end);
    }

    // Delta recomputed from the logs alone.
    let with = end_records[0]["final_miou"].as_f64().unwrap();
    let without = end_records[1]["final_miou"].as_f64().unwrap();
    assert_eq!(report["miou_delta"].as_f64().unwrap(), with - without);

    // Identical sample orderings across arms.
    assert_eq!(
        end_records[0]["sample_order_hash"], end_records[1]["sample_order_hash"],
        "arms drew different sample sequences"
    );
    println!("  delta (with - without) = {:+.4}", with - without);
    pass("08 ablation-harness", t0);
}

// ---------------------------------------------------------------------------
// 09: augmentation applies the flip to both modalities or neither, never
// invents label values (beyond ignore padding), and repeats exactly.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_augmentation_equivariance() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0009);

    let flip_cfg = AugConfig {
        crop_height: 32,
        crop_width: 32,
        hflip_probability: 0.5,
        scale_min: 1.0,
        scale_max: 1.0,
        ..AugConfig::default()
    };
    let jitter_cfg = AugConfig {
        crop_height: 32,
        crop_width: 32,
        hflip_probability: 0.5,
        scale_min: 0.5,
        scale_max: 1.5,
        ..AugConfig::default()
    };

    let normalize = |cfg: &AugConfig, img: &TensorImage<f32>| -> TensorImage<f32> {
        let mut out = img.clone();
        for ch in 0..3 {
            out.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|v| cfg.normalize_pixel(ch, v));
        }
        out
    };

    let (mut flipped, mut kept) = (0usize, 0usize);
    for trial in 0..500u64 {
        let image = TensorImage::<f32>::from_shape_fn((1, 3, 32, 32), |_| rng.gen::<f32>());
        let alphabet: Vec<u8> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..19)).collect();
        let label = label_map(Array2::from_shape_fn((32, 32), |_| {
            if rng.gen_bool(0.05) {
                IGNORE_LABEL
            } else {
                alphabet[rng.gen_range(0..alphabet.len())]
            }
        }));

        // Identity geometry: the output is the normalized input or its
        // mirror, with image and label agreeing on which.
        let (ai, al) = augment(&image, &label, &flip_cfg, trial).unwrap();
        let plain = normalize(&flip_cfg, &image);
        let mirrored = plain.slice(s![.., .., .., ..;-1]).to_owned();
        let label_mirrored = label.data().slice(s![.., ..;-1]).to_owned();
        if ai == plain && al.data() == label.data() {
            kept += 1;
        } else {
            assert!(ai == mirrored, "trial {trial}: image neither kept nor mirrored");
            assert!(
                al.data() == &label_mirrored,
                "trial {trial}: label did not follow the image flip"
            );
            flipped += 1;
        }

        // Scale jitter may pad with ignore but never invents class values.
        let in_set: HashSet<u8> = label.data().iter().copied().collect();
        let (_, jl) = augment(&image, &label, &jitter_cfg, trial ^ 0x5555).unwrap();
        for v in jl.data() {
            assert!(
                in_set.contains(v) || *v == IGNORE_LABEL,
                "trial {trial}: label value {v} appeared from nowhere"
            );
        }

        // Exact repeatability at a fixed seed.
        let (a1, l1) = augment(&image, &label, &jitter_cfg, trial ^ 0x5555).unwrap();
        let (a2, l2) = augment(&image, &label, &jitter_cfg, trial ^ 0x5555).unwrap();
        assert!(
            a1.iter().zip(a2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "trial {trial}: repeated augmentation differs"
        );
        assert!(l1.data() == l2.data());
    }
    assert!(flipped > 100 && kept > 100, "flip coin looks stuck: {flipped}/{kept}");

    budget("09", t0, 30.0);
    pass("09 augmentation-equivariance", t0);
}

// ---------------------------------------------------------------------------
// 10: checkpoint save → load → forward reproduces pre-save outputs bitwise.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_checkpoint_round_trip() {
    let t0 = Instant::now();
    let rcfg = RelightConfig { base_channels: 4, num_res_blocks: 1, zero_init_last: false };
    let scfg = SegConfig {
        stem_channels: 4,
        branch_channels: [4, 8, 16, 32],
        blocks_per_branch: 1,
        modules_per_stage: [1, 1, 1, 1],
        head_mid_channels: 8,
        num_classes: 4,
    };
    let tcfg = TrainConfig { seed: 100, ..TrainConfig::default() };
    let mut state = TrainState::new(&tcfg, &rcfg, &scfg).unwrap();

    let inputs: Vec<TensorImage<f32>> =
        (0..5).map(|i| rand_image::<f32>((1, 3, 32, 32), 200 + i)).collect();
    let before: Vec<(TensorImage<f32>, TensorImage<f32>)> = inputs
        .iter()
        .map(|x| {
            let relit = state.relight.forward(x, Mode::Eval, false).unwrap();
            let logits = state.seg.forward(&relit, Mode::Eval, false).unwrap();
            (relit, logits)
        })
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trip.ckpt");
    state.to_checkpoint("demo = true\n").save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();

    // A differently seeded state proves the restore overwrites everything
    // the forward pass depends on.
    let other = TrainConfig { seed: 999, ..TrainConfig::default() };
    let mut restored = TrainState::new(&other, &rcfg, &scfg).unwrap();
    restored.restore_checkpoint(&loaded).unwrap();

    for (x, (relit_before, logits_before)) in inputs.iter().zip(&before) {
        let relit = restored.relight.forward(x, Mode::Eval, false).unwrap();
        let logits = restored.seg.forward(&relit, Mode::Eval, false).unwrap();
        let same = |a: &TensorImage<f32>, b: &TensorImage<f32>| {
            a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits())
        };
        assert!(same(&relit, relit_before), "relit output changed across the round trip");
        assert!(same(&logits, logits_before), "logits changed across the round trip");
    }
    budget("10", t0, 30.0);
    pass("10 checkpoint-round-trip", t0);
}

// ---------------------------------------------------------------------------
// 11: adversarial training keeps gradient flows strictly separated.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_adaptation_gradient_isolation() {
    let t0 = Instant::now();
    let rcfg = RelightConfig { base_channels: 4, num_res_blocks: 1, zero_init_last: false };
    let scfg = SegConfig {
        stem_channels: 4,
        branch_channels: [4, 8, 16, 32],
        blocks_per_branch: 1,
        modules_per_stage: [1, 1, 1, 1],
        head_mid_channels: 8,
        num_classes: 4,
    };
    let tcfg = TrainConfig {
        seed: 300,
        adaptation: Some(AdaptConfig { adv_weight: 0.01, disc_lr: 1e-4, disc_channels: 2 }),
        target: Some(DatasetSpec::default()),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&tcfg, &rcfg, &scfg).unwrap();

    let src = rand_image::<f32>((2, 3, 32, 32), 301);
    let tgt = rand_image::<f32>((2, 3, 32, 32), 302);
    let labels = vec![
        LabelMap::filled(1, 32, 32).unwrap(),
        LabelMap::filled(2, 32, 32).unwrap(),
    ];

    let all_zero = |grads: Vec<(String, Vec<f32>)>| -> bool {
        grads.iter().all(|(_, g)| g.iter().all(|v| *v == 0.0))
    };

    // The supervised term must not reach the discriminator at all.
    state.relight.zero_grads();
    state.seg.zero_grads();
    state.disc.as_mut().unwrap().zero_grads();
    let (_, logits) = state.segmentation_pass(&src, &labels).unwrap();
    assert!(
        all_zero(state.disc.as_mut().unwrap().grad_snapshot()),
        "cross-entropy leaked gradient into the discriminator"
    );

    // The discriminator's own step must not reach the segmenter or the
    // relighting net: it sees detached probability maps.
    let (_, tgt_probs) = state.generator_adversarial_pass(&tgt).unwrap();
    let src_probs = softmax_channels(&logits);
    state.relight.zero_grads();
    state.seg.zero_grads();
    state.discriminator_pass(&src_probs, &tgt_probs).unwrap();
    assert!(
        all_zero(state.relight.grad_snapshot()),
        "discriminator step leaked gradient into the relighting net"
    );
    assert!(
        all_zero(state.seg.grad_snapshot()),
        "discriminator step leaked gradient into the segmenter"
    );
    assert!(
        !all_zero(state.disc.as_mut().unwrap().grad_snapshot()),
        "discriminator step produced no gradient for the discriminator itself"
    );

    budget("11", t0, 60.0);
    pass("11 adaptation-gradient-isolation", t0);
}
