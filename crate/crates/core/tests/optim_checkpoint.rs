//! Optimizer, schedule, EMA, and the checkpoint wire format.

use pvlr_core::checkpoint::{Checkpoint, NamedTensor, MAGIC, VERSION};
use pvlr_core::optim::{adamw_step, cosine_lr, AdamWParams, AdamWState, EmaState};
use pvlr_core::params::ParamStore;
use tempfile::tempdir;

fn scalar_store(value: f64) -> ParamStore {
    let mut store = ParamStore::new();
    store.register("theta", vec![1], vec![value]).unwrap();
    store
}

/// One AdamW step on a scalar against the update formula computed by hand.
#[test]
fn adamw_scalar_hand_trace() {
    let theta0 = 0.5;
    let g = 0.2;
    let lr = 0.1;
    let hp = AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
    let mut store = scalar_store(theta0);
    let mut state = AdamWState::new(&store);
    adamw_step(&mut store, &[vec![g]], &mut state, lr, &hp).unwrap();

    // by hand: m = 0.1 g, v = 0.001 g^2, bias-corrected over step 1
    let m = (1.0 - hp.beta1) * g;
    let v = (1.0 - hp.beta2) * g * g;
    let mhat = m / (1.0 - hp.beta1);
    let vhat = v / (1.0 - hp.beta2);
    let decayed = theta0 - lr * hp.weight_decay * theta0;
    let want = decayed - lr * mhat / (vhat.sqrt() + hp.eps);
    let got = store.get(0).values[0];
    assert!((got - want).abs() <= 1e-15, "{got} vs {want}");
}

/// Zero gradient: wd = 0 leaves the parameter unchanged; wd > 0 scales it
/// by exactly (1 - lr wd), demonstrating the decoupling.
#[test]
fn adamw_zero_grad_decoupling() {
    let mut store = scalar_store(2.0);
    let mut state = AdamWState::new(&store);
    let hp = AdamWParams { weight_decay: 0.0, ..AdamWParams::default() };
    adamw_step(&mut store, &[vec![0.0]], &mut state, 0.1, &hp).unwrap();
    assert_eq!(store.get(0).values[0], 2.0);

    let mut store = scalar_store(2.0);
    let mut state = AdamWState::new(&store);
    let hp = AdamWParams { weight_decay: 0.5, ..AdamWParams::default() };
    adamw_step(&mut store, &[vec![0.0]], &mut state, 0.1, &hp).unwrap();
    assert_eq!(store.get(0).values[0], 2.0 * (1.0 - 0.1 * 0.5));
}

/// Missing or misshapen gradients are contract errors.
#[test]
fn adamw_rejects_bad_grads() {
    let mut store = scalar_store(1.0);
    let mut state = AdamWState::new(&store);
    let hp = AdamWParams::default();
    assert!(adamw_step(&mut store, &[], &mut state, 0.1, &hp).is_err());
    assert!(adamw_step(&mut store, &[vec![0.0, 0.0]], &mut state, 0.1, &hp).is_err());
}

/// Cosine schedule endpoints and midpoint.
#[test]
fn cosine_schedule_shape() {
    assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
    let end = cosine_lr(100, 100, 1e-3, 1e-5).unwrap();
    assert!((end - 1e-5).abs() <= 1e-18);
    let mid = cosine_lr(50, 100, 1e-3, 1e-5).unwrap();
    assert!((mid - (1e-3 + 1e-5) / 2.0).abs() <= 1e-18);
    // monotone nonincreasing over the whole schedule
    let mut prev = f64::INFINITY;
    for s in 0..=100 {
        let lr = cosine_lr(s, 100, 1e-3, 0.0).unwrap();
        assert!(lr <= prev + 1e-18);
        prev = lr;
    }
    assert!(cosine_lr(101, 100, 1e-3, 0.0).is_err());
    assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
}

/// EMA formula: beta = 1 freezes the shadow, beta = 0 copies the live
/// values, and one generic step matches beta*s + (1-beta)*p exactly.
#[test]
fn ema_one_step_formula() {
    let theta0 = 1.0;
    let theta1 = 3.0;
    for (beta, want) in [
        (1.0, theta0),
        (0.0, theta1),
        (0.9997, 0.9997 * theta0 + 0.0003 * theta1),
    ] {
        let store0 = scalar_store(theta0);
        let mut ema = EmaState::new(&store0, beta);
        let store1 = scalar_store(theta1);
        ema.update(&store1).unwrap();
        assert_eq!(ema.shadow[0][0], want, "beta {beta}");
    }
}

/// shadow_store returns the shadow without touching the live parameters.
#[test]
fn ema_never_mutates_live_params() {
    let mut store = scalar_store(1.0);
    let mut ema = EmaState::new(&store, 0.5);
    store.get_mut(0).values[0] = 9.0;
    ema.update(&store).unwrap();
    let shadow = ema.shadow_store(&store).unwrap();
    assert_eq!(shadow.get(0).values[0], 5.0);
    assert_eq!(store.get(0).values[0], 9.0);
}

// --------------------------------------------------------------------------
// checkpoint wire format

fn sample_checkpoint() -> Checkpoint {
    Checkpoint {
        config_json: "{\"note\":\"roundtrip\"}".to_string(),
        tensors: vec![
            NamedTensor {
                name: "w".into(),
                shape: vec![2, 3],
                values: vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300],
            },
            NamedTensor { name: "b".into(), shape: vec![3], values: vec![0.5, -0.5, 0.0] },
            NamedTensor { name: "empty_rank".into(), shape: vec![], values: vec![1.0] },
        ],
    }
}

/// save -> load is bit-identical down to the f64 payload bits, and the
/// header bytes follow the documented layout.
#[test]
fn checkpoint_roundtrip_bit_identical() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    let ckpt = sample_checkpoint();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config_json, ckpt.config_json);
    assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
    for (a, b) in loaded.tensors.iter().zip(&ckpt.tensors) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        let ab: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }

    // header layout: magic, version u32 LE, config length u32 LE
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[0..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    assert_eq!(&bytes[12..12 + cfg_len], ckpt.config_json.as_bytes());

    // saving the loaded state reproduces the file byte for byte
    let path2 = dir.path().join("again.ckpt");
    loaded.save(&path2).unwrap();
    assert_eq!(bytes, std::fs::read(&path2).unwrap());
}

/// Corrupted magic, unsupported version, and truncation are all format
/// errors (the offset is carried in the message).
#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    sample_checkpoint().save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    let e = Checkpoint::load(&path).unwrap_err();
    assert!(e.to_string().contains("magic"), "{e}");

    let mut bad_version = good.clone();
    bad_version[4] = 99;
    std::fs::write(&path, &bad_version).unwrap();
    let e = Checkpoint::load(&path).unwrap_err();
    assert!(e.to_string().contains("version"), "{e}");

    std::fs::write(&path, &good[..good.len() - 5]).unwrap();
    let e = Checkpoint::load(&path).unwrap_err();
    assert!(e.to_string().contains("truncated"), "{e}");

    std::fs::write(&path, &good[..2]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn checkpoint_find_by_name() {
    let ckpt = sample_checkpoint();
    assert!(ckpt.find("w").is_some());
    assert!(ckpt.find("missing").is_none());
}
