//! Model state and its JSON checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{decode_f32_b64, encode_f32_b64};
use crate::error::{Result, WishError};
use crate::numerics::{AdamState, AdapterParams, Matrix};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Visual,
    Textual,
    Contact,
    Matching,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [
        AdapterKind::Visual,
        AdapterKind::Textual,
        AdapterKind::Contact,
        AdapterKind::Matching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Visual => "visual",
            AdapterKind::Textual => "textual",
            AdapterKind::Contact => "contact",
            AdapterKind::Matching => "match",
        }
    }
}

/// One value per adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct PerAdapter<T> {
    pub visual: T,
    pub textual: T,
    pub contact: T,
    pub matching: T,
}

impl<T> PerAdapter<T> {
    pub fn from_fn(mut f: impl FnMut(AdapterKind) -> T) -> Self {
        Self {
            visual: f(AdapterKind::Visual),
            textual: f(AdapterKind::Textual),
            contact: f(AdapterKind::Contact),
            matching: f(AdapterKind::Matching),
        }
    }

    pub fn get(&self, kind: AdapterKind) -> &T {
        match kind {
            AdapterKind::Visual => &self.visual,
            AdapterKind::Textual => &self.textual,
            AdapterKind::Contact => &self.contact,
            AdapterKind::Matching => &self.matching,
        }
    }

    pub fn get_mut(&mut self, kind: AdapterKind) -> &mut T {
        match kind {
            AdapterKind::Visual => &mut self.visual,
            AdapterKind::Textual => &mut self.textual,
            AdapterKind::Contact => &mut self.contact,
            AdapterKind::Matching => &mut self.matching,
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(AdapterKind, &T) -> Result<U>) -> Result<PerAdapter<U>> {
        Ok(PerAdapter {
            visual: f(AdapterKind::Visual, &self.visual)?,
            textual: f(AdapterKind::Textual, &self.textual)?,
            contact: f(AdapterKind::Contact, &self.contact)?,
            matching: f(AdapterKind::Matching, &self.matching)?,
        })
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub d_v: usize,
    pub d_h: usize,
    pub tau: f64,
    pub config: TrainConfig,
    pub adapters: PerAdapter<AdapterParams>,
    pub optimizer: Option<PerAdapter<AdamState>>,
}

impl ModelState {
    /// Fresh state: four independent residual adapters with hidden width
    /// equal to the embedding width, seeded from `config.seed`.
    pub fn init(d_v: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if d_v == 0 {
            return Err(WishError::Shape("embedding dim must be positive".into()));
        }
        let d_h = d_v;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adapters = PerAdapter::from_fn(|_| {
            AdapterParams::init_uniform(d_v, d_h, config.init_scale, &mut rng)
        });
        let optimizer = Some(PerAdapter::from_fn(|k| {
            AdamState::new(config.lr, adapters.get(k))
        }));
        Ok(Self {
            d_v,
            d_h,
            tau: config.tau,
            config: config.clone(),
            adapters,
            optimizer,
        })
    }

    /// All-zero adapters: every adapter is exactly the identity.
    pub fn identity(d_v: usize, config: &TrainConfig) -> Result<Self> {
        let mut s = Self::init(d_v, config)?;
        s.adapters = PerAdapter::from_fn(|_| AdapterParams::zeros(d_v, d_v));
        s.optimizer = Some(PerAdapter::from_fn(|k| AdamState::new(config.lr, s.adapters.get(k))));
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(WishError::Config("tau must be positive".into()));
        }
        self.config.validate()?;
        for kind in AdapterKind::ALL {
            let a = self.adapters.get(kind);
            a.validate()?;
            if a.input_dim() != self.d_v || a.hidden_dim() != self.d_h {
                return Err(WishError::Shape(format!("{} adapter dims", kind.name())));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Dims {
    d_v: usize,
    d_h: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorsWire {
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

#[derive(Serialize, Deserialize)]
struct AdamWire {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: TensorsWire,
    v: TensorsWire,
}

#[derive(Serialize, Deserialize)]
struct CheckpointWire {
    version: u32,
    dims: Dims,
    tau: f64,
    hyperparams: TrainConfig,
    adapters: BTreeMap<String, TensorsWire>,
    optimizer: Option<BTreeMap<String, AdamWire>>,
}

fn tensors_to_wire(p: &AdapterParams) -> TensorsWire {
    TensorsWire {
        w1: encode_f32_b64(&p.w1.data),
        b1: encode_f32_b64(&p.b1),
        w2: encode_f32_b64(&p.w2.data),
        b2: encode_f32_b64(&p.b2),
    }
}

fn tensors_from_wire(t: &TensorsWire, d_v: usize, d_h: usize) -> Result<AdapterParams> {
    let dec = |s: &str, n: usize, what: &str| -> Result<Vec<f64>> {
        let v = decode_f32_b64(s).map_err(|e| WishError::Corrupt(format!("{what}: {e}")))?;
        if v.len() != n {
            return Err(WishError::Corrupt(format!("{what} has {} values, expected {n}", v.len())));
        }
        Ok(v)
    };
    Ok(AdapterParams {
        w1: Matrix::from_rows(d_h, d_v, dec(&t.w1, d_h * d_v, "w1")?)?,
        b1: dec(&t.b1, d_h, "b1")?,
        w2: Matrix::from_rows(d_v, d_h, dec(&t.w2, d_v * d_h, "w2")?)?,
        b2: dec(&t.b2, d_v, "b2")?,
    })
}

pub fn checkpoint_to_string(state: &ModelState) -> Result<String> {
    let adapters = AdapterKind::ALL
        .iter()
        .map(|&k| (k.name().to_string(), tensors_to_wire(state.adapters.get(k))))
        .collect();
    let optimizer = state.optimizer.as_ref().map(|opt| {
        AdapterKind::ALL
            .iter()
            .map(|&k| {
                let a = opt.get(k);
                let wire = AdamWire {
                    step: a.step,
                    lr: a.lr,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    m: tensors_to_wire(&a.first_moment),
                    v: tensors_to_wire(&a.second_moment),
                };
                (k.name().to_string(), wire)
            })
            .collect()
    });
    let wire = CheckpointWire {
        version: CHECKPOINT_VERSION,
        dims: Dims {
            d_v: state.d_v,
            d_h: state.d_h,
        },
        tau: state.tau,
        hyperparams: state.config.clone(),
        adapters,
        optimizer,
    };
    Ok(serde_json::to_string(&wire)?)
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelState> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| WishError::Corrupt(format!("checkpoint json: {e}")))?;
    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| WishError::Corrupt("missing version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(WishError::Version {
            found: version.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let wire: CheckpointWire =
        serde_json::from_value(value).map_err(|e| WishError::Corrupt(e.to_string()))?;
    let (d_v, d_h) = (wire.dims.d_v, wire.dims.d_h);
    let adapter = |k: AdapterKind| -> Result<AdapterParams> {
        let t = wire
            .adapters
            .get(k.name())
            .ok_or_else(|| WishError::Corrupt(format!("missing {} adapter", k.name())))?;
        tensors_from_wire(t, d_v, d_h)
    };
    let adapters = PerAdapter {
        visual: adapter(AdapterKind::Visual)?,
        textual: adapter(AdapterKind::Textual)?,
        contact: adapter(AdapterKind::Contact)?,
        matching: adapter(AdapterKind::Matching)?,
    };
    let optimizer = match &wire.optimizer {
        None => None,
        Some(opt) => Some(adapters.try_map(|k, _| {
            let a = opt
                .get(k.name())
                .ok_or_else(|| WishError::Corrupt(format!("missing {} optimizer", k.name())))?;
            Ok(AdamState {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
                first_moment: tensors_from_wire(&a.m, d_v, d_h)?,
                second_moment: tensors_from_wire(&a.v, d_v, d_h)?,
            })
        })?),
    };
    let state = ModelState {
        d_v,
        d_h,
        tau: wire.tau,
        config: wire.hyperparams,
        adapters,
        optimizer,
    };
    state
        .validate()
        .map_err(|e| WishError::Corrupt(e.to_string()))?;
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> ModelState {
        let cfg = TrainConfig {
            init_scale: 0.3,
            seed: 9,
            ..TrainConfig::default()
        };
        ModelState::init(5, &cfg).unwrap()
    }

    fn bits(p: &AdapterParams) -> Vec<u32> {
        p.tensors()
            .iter()
            .flat_map(|t| t.iter().map(|v| (*v as f32).to_bits()))
            .collect()
    }

    #[test]
    fn save_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for k in AdapterKind::ALL {
            assert_eq!(bits(s.adapters.get(k)), bits(back.adapters.get(k)));
        }
        assert_eq!(back.config, s.config);
        let again = checkpoint_to_string(&back).unwrap();
        assert_eq!(again, std::fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn version_mismatch() {
        let text = checkpoint_to_string(&state()).unwrap();
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["version"] = 999.into();
        assert!(matches!(
            checkpoint_from_str(&v.to_string()),
            Err(WishError::Version { found: 999, .. })
        ));
    }

    #[test]
    fn truncated_is_corrupt() {
        let text = checkpoint_to_string(&state()).unwrap();
        assert!(matches!(
            checkpoint_from_str(&text[..text.len() / 2]),
            Err(WishError::Corrupt(_))
        ));
    }

    #[test]
    fn wrong_tensor_length_is_corrupt() {
        let text = checkpoint_to_string(&state()).unwrap();
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["adapters"]["visual"]["b1"] = encode_f32_b64(&[1.0]).into();
        assert!(matches!(
            checkpoint_from_str(&v.to_string()),
            Err(WishError::Corrupt(_))
        ));
    }

    #[test]
    fn identity_state_is_zero() {
        let s = ModelState::identity(3, &TrainConfig::default()).unwrap();
        assert!(s.adapters.visual.is_zero() && s.adapters.matching.is_zero());
    }
}
