use std::sync::OnceLock;

use ctsel::autodiff::{LeafKind, Tape, Tensor};
use ctsel::data::{generate_dataset, Dataset, GenerationConfig, SplitSizes};
use ctsel::models::*;
use ctsel::rng;
use ctsel::sim::{System, TimeGrid};
use ctsel::Error;
use rand::Rng;

fn small_arch(flavor: Flavor) -> Architecture {
    Architecture {
        hidden: 8,
        ..Architecture::new(flavor, &TimeGrid::default())
    }
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = GenerationConfig {
            system: System::Covid,
            sizes: SplitSizes {
                train: 256,
                val: 32,
                test: 16,
            },
            ..GenerationConfig::default()
        };
        generate_dataset(&cfg, 11).unwrap()
    })
}

fn history(i: usize) -> History {
    let ds = dataset();
    History::from_patient(&ds.test[i], ds.grid())
}

fn trained(flavor: Flavor) -> &'static TrainedModel {
    static CRN: OnceLock<TrainedModel> = OnceLock::new();
    static GNET: OnceLock<TrainedModel> = OnceLock::new();
    let cell = match flavor {
        Flavor::CrnLite => &CRN,
        Flavor::GnetLite => &GNET,
    };
    cell.get_or_init(|| {
        let ds = dataset();
        let arch = Architecture::new(flavor, ds.grid());
        let cfg = TrainConfig {
            epochs: 25,
            seed: 5,
            ..TrainConfig::default()
        };
        train(arch, &ds.train, &ds.val, &cfg).unwrap()
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn output_has_horizon_length_and_is_deterministic() {
    for flavor in [Flavor::CrnLite, Flavor::GnetLite] {
        let model = SurrogateModel::init(small_arch(flavor), 1).unwrap();
        let a = [0.3; 10];
        let y1 = model.predict(&history(0), &a, None).unwrap();
        let y2 = model.predict(&history(0), &a, None).unwrap();
        assert_eq!(y1.len(), 10);
        assert_eq!(y1, y2);
        assert!(model.predict(&history(0), &a[..9], None).is_err());
    }
}

#[test]
fn zero_dropout_passes_agree() {
    let arch = Architecture {
        dropout: 0.0,
        ..small_arch(Flavor::CrnLite)
    };
    let model = SurrogateModel::init(arch, 1).unwrap();
    let mut rngs: Vec<_> = (0..4).map(|i| rng::stream(9, &[i])).collect();
    let passes = model.predict_passes(&history(1), &[0.5; 10], &mut rngs).unwrap();
    assert!(passes.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(passes[0], model.predict(&history(1), &[0.5; 10], None).unwrap());
}

#[test]
fn treatment_gradient_matches_finite_differences() {
    for flavor in [Flavor::CrnLite, Flavor::GnetLite] {
        let model = SurrogateModel::init(small_arch(flavor), 2).unwrap();
        let hist = history(2);
        let a0: Vec<f64> = (0..10).map(|i| 0.1 + 0.08 * i as f64).collect();
        let enc = model.encode(&[&hist]).unwrap();
        let tape = Tape::new();
        let params = model.bind(&tape, LeafKind::Constant);
        let a = tape.input(Tensor::row(&a0));
        let out = model
            .forward(&tape, &params, &enc, &[hist.last_outcome()], a, Dropout::Off)
            .unwrap();
        let g = tape.backward(out.mean().unwrap()).unwrap().wrt(a);
        let mean = |a: &[f64]| model.predict(&hist, a, None).unwrap().iter().sum::<f64>() / 10.0;
        let h = 1e-5;
        for i in 0..10 {
            let (mut up, mut down) = (a0.clone(), a0.clone());
            up[i] += h;
            down[i] -= h;
            let numeric = (mean(&up) - mean(&down)) / (2.0 * h);
            assert!(rel_err(g.data()[i], numeric) < 1e-4, "{flavor} a[{i}]: {} vs {numeric}", g.data()[i]);
        }
    }
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let ds = dataset();
    for flavor in [Flavor::CrnLite, Flavor::GnetLite] {
        let arch = small_arch(flavor);
        let prepared: Vec<Prepared> = ds.train[..6].iter().map(|p| Prepared::from_patient(p, &arch).unwrap()).collect();
        let batch: Vec<&Prepared> = prepared.iter().collect();
        let w0 = SurrogateModel::init(arch, 4).unwrap().weights().to_vec();
        // balancing off: the HSIC bandwidth is a data-dependent constant
        let loss = |w: &[Tensor]| loss_and_grad(&arch, w, &batch, 0.0, &mut rng::stream(1, &[])).unwrap();
        let base = loss(&w0);
        let mut pick = rng::stream(77, &[]);
        let h = 1e-5;
        for _ in 0..20 {
            let t = pick.random_range(0..w0.len());
            let i = pick.random_range(0..w0[t].len());
            let mut w = w0.clone();
            w[t].data_mut()[i] += h;
            let up = loss(&w).total;
            w[t].data_mut()[i] -= 2.0 * h;
            let down = loss(&w).total;
            let numeric = (up - down) / (2.0 * h);
            let analytic = base.grads[t].data()[i];
            assert!(rel_err(analytic, numeric) < 1e-4, "{flavor} w{t}[{i}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn zero_balancing_weight_is_plain_mse() {
    let ds = dataset();
    let arch = small_arch(Flavor::CrnLite);
    let prepared: Vec<Prepared> = ds.train[..8].iter().map(|p| Prepared::from_patient(p, &arch).unwrap()).collect();
    let batch: Vec<&Prepared> = prepared.iter().collect();
    let w = SurrogateModel::init(arch, 4).unwrap().weights().to_vec();
    let l = loss_and_grad(&arch, &w, &batch, 0.0, &mut rng::stream(1, &[])).unwrap();
    assert!(l.hsic.is_none());
    assert_eq!(l.total, l.mse);
}

#[test]
fn revin_makes_predictions_shift_equivariant() {
    let model = SurrogateModel::init(small_arch(Flavor::GnetLite), 8).unwrap();
    let hist = history(3);
    let c = 2.5;
    let shifted = History {
        y: hist.y.iter().map(|y| y + c).collect(),
        ..hist.clone()
    };
    let a = [0.4; 10];
    let base = model.predict(&hist, &a, None).unwrap();
    let moved = model.predict(&shifted, &a, None).unwrap();
    for (b, m) in base.iter().zip(&moved) {
        assert!((m - b - c).abs() < 1e-9);
    }
}

#[test]
fn save_load_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    for flavor in [Flavor::CrnLite, Flavor::GnetLite] {
        let model = SurrogateModel::init(small_arch(flavor), 6).unwrap();
        let path = dir.path().join(format!("{flavor}.ctsm"));
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path, Some(flavor)).unwrap();
        let a = [0.2; 10];
        let p1 = model.predict(&history(0), &a, None).unwrap();
        let p2 = loaded.predict(&history(0), &a, None).unwrap();
        assert_eq!(p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let other = match flavor {
            Flavor::CrnLite => Flavor::GnetLite,
            Flavor::GnetLite => Flavor::CrnLite,
        };
        assert!(matches!(load_model(&path, Some(other)), Err(Error::Architecture(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 0x40;
        assert!(matches!(read_model(&bytes, None), Err(Error::Checksum { .. })));
    }
}

#[test]
fn version_mismatch_is_reported() {
    let model = SurrogateModel::init(small_arch(Flavor::CrnLite), 6).unwrap();
    let bytes = write_model(&model).unwrap();
    let text = String::from_utf8_lossy(&bytes[8..]).into_owned();
    let pos = text.find("\"schema_version\":1").unwrap() + 8;
    let mut edited = bytes[..bytes.len() - 4].to_vec();
    edited[pos + "\"schema_version\":".len()] = b'7';
    let crc = crc32(&edited);
    edited.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(read_model(&edited, None), Err(Error::Version { .. })));
}

/// Bitwise CRC-32 (IEEE), independent of the library's implementation.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn training_reduces_loss_for_three_seeds() {
    let ds = dataset();
    for seed in 0..3 {
        let arch = Architecture {
            hidden: 16,
            ..Architecture::new(Flavor::CrnLite, ds.grid())
        };
        let cfg = TrainConfig {
            epochs: 5,
            patience: 100,
            seed,
            ..TrainConfig::default()
        };
        let t = train(arch, &ds.train, &ds.val, &cfg).unwrap();
        assert!(t.curves.train.last().unwrap() < &t.curves.train[0], "seed {seed}: {:?}", t.curves.train);
    }
}

#[test]
fn trained_models_beat_persistence() {
    let ds = dataset();
    for flavor in [Flavor::CrnLite, Flavor::GnetLite] {
        let t = trained(flavor);
        let val: Vec<Prepared> = ds.val.iter().map(|p| Prepared::from_patient(p, t.model.arch()).unwrap()).collect();
        let model_mse = rollout_mse(&t.model, &val, Units::Raw).unwrap();
        let persist = persistence_mse(&val, t.model.arch(), Units::Raw);
        assert!(model_mse < persist, "{flavor}: {model_mse} vs {persist}");
    }
}

#[test]
fn trained_treatment_pathway_is_live() {
    for flavor in [Flavor::CrnLite, Flavor::GnetLite] {
        let m = &trained(flavor).model;
        let lo = m.predict(&history(4), &[0.1; 10], None).unwrap();
        let hi = m.predict(&history(4), &[0.9; 10], None).unwrap();
        let diff: f64 = lo.iter().zip(&hi).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0;
        assert!(diff > 0.0);
    }
}

#[test]
fn monte_carlo_mean_converges() {
    let m = &trained(Flavor::CrnLite).model;
    let hist = history(5);
    let a = [0.5; 10];
    let run = |n: usize, seed: u64| {
        let mut rngs: Vec<_> = (0..n as u64).map(|i| rng::stream(seed, &[i])).collect();
        m.predict_passes(&hist, &a, &mut rngs).unwrap()
    };
    let few = run(8, 1);
    let many = run(512, 2);
    for j in 0..10 {
        let col = |p: &[Vec<f64>]| p.iter().map(|r| r[j]).collect::<Vec<_>>();
        let (f, mny) = (col(&few), col(&many));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mf = mean(&f);
        let sd = (f.iter().map(|x| (x - mf).powi(2)).sum::<f64>() / 7.0).sqrt();
        assert!(sd > 0.0);
        assert!((mean(&mny) - mf).abs() < 3.0 * sd / 8f64.sqrt(), "step {j}");
    }
}
