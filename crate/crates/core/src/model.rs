//! Hybrid classifier: quantum branch and ViT branch fused into an MLP head.
//!
//! Fused vector layout is `[quantum (64) | vit (d_model)]`. In baseline mode
//! the quantum branch is absent and the head reads the ViT vector alone.

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::nn::{Init, LayerNorm, Linear};
use crate::numerics::{Graph, ParamStore, Real, Var};
use crate::quanv::{QuanvBranch, QuanvConfig, Readout};
use crate::vit::{ViTConfig, ViT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Hybrid,
    Baseline,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Hybrid => "hybrid",
            Mode::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: [usize; 2],
    pub dropout: [f64; 2],
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: [512, 256],
            dropout: [0.5, 0.4],
            classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub quanv: QuanvConfig,
    pub vit: ViTConfig,
    pub classifier: ClassifierConfig,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            mode: Mode::Hybrid,
            quanv: QuanvConfig::default(),
            vit: ViTConfig::paper(),
            classifier: ClassifierConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self {
            vit: ViTConfig::toy(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.mode == Mode::Hybrid {
            self.quanv.validate()?;
        }
        let c = &self.classifier;
        if c.hidden.contains(&0) || c.classes < 2 {
            return Err(Error::Config("classifier widths must be positive and classes >= 2".into()));
        }
        if c.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config(format!("classifier.dropout must be in [0, 1), got {:?}", c.dropout)));
        }
        Ok(())
    }

    /// Width of the classifier input.
    pub fn fused_width(&self) -> usize {
        match self.mode {
            Mode::Hybrid => self.quanv.feature_dim + self.vit.d_model,
            Mode::Baseline => self.vit.d_model,
        }
    }
}

/// Concatenates `[B,q]` and `[B,v]` into `[B,q+v]`, quantum features first.
pub fn fuse<T: Real>(g: &mut Graph<T>, quantum: Var, context: Var, q_width: usize, v_width: usize) -> Result<Var> {
    let (qs, vs) = (g.shape(quantum).to_vec(), g.shape(context).to_vec());
    if qs.len() != 2 || vs.len() != 2 || qs[1] != q_width || vs[1] != v_width || qs[0] != vs[0] {
        return Err(dim_err!("fuse expects [B,{q_width}] and [B,{v_width}], got {:?} and {:?}", qs, vs));
    }
    g.concat(&[quantum, context], 1)
}

#[derive(Clone, Debug)]
pub struct Classifier {
    fc1: Linear,
    ln1: LayerNorm,
    fc2: Linear,
    ln2: LayerNorm,
    head: Linear,
    dropout: [f64; 2],
}

impl Classifier {
    pub fn new(prefix: &str, input: usize, cfg: &ClassifierConfig) -> Self {
        let [h1, h2] = cfg.hidden;
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), input, h1),
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), h1),
            fc2: Linear::new(&format!("{prefix}.fc2"), h1, h2),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), h2),
            head: Linear::new(&format!("{prefix}.head"), h2, cfg.classes),
            dropout: cfg.dropout,
        }
    }

    pub fn input_weight(&self) -> &str {
        &self.fc1.weight
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(store, Init::FanIn, rng)?;
        self.ln1.init(store)?;
        self.fc2.init(store, Init::FanIn, rng)?;
        self.ln2.init(store)?;
        // Small output weights keep initial logits near uniform.
        self.head.init(store, Init::TruncNormal(0.02), rng)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.ln1.num_params() + self.fc2.num_params() + self.ln2.num_params() + self.head.num_params()
    }

    /// `[B,fused]` -> logits `[B,classes]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var) -> Result<Var> {
        let s = g.shape(fused);
        if s.len() != 2 || s[1] != self.fc1.inputs {
            return Err(dim_err!("classifier expects [B,{}], got {:?}", self.fc1.inputs, s));
        }
        let mut h = fused;
        for ((fc, ln), p) in [(&self.fc1, &self.ln1), (&self.fc2, &self.ln2)].into_iter().zip(self.dropout) {
            h = fc.forward(g, store, h)?;
            h = ln.forward(g, store, h)?;
            h = g.gelu(h);
            h = g.dropout(h, p)?;
        }
        self.head.forward(g, store, h)
    }
}

/// Every intermediate of interest from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub quantum_map: Option<Var>,
    pub quantum: Option<Var>,
    pub context: Var,
    pub fused: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    pub config: ModelConfig,
    quanv: Option<QuanvBranch>,
    vit: ViT,
    classifier: Classifier,
    counter: Arc<AtomicU64>,
}

impl HybridModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let counter = Arc::new(AtomicU64::new(0));
        let quanv = match config.mode {
            Mode::Hybrid => Some(QuanvBranch::new("quanv", config.quanv.clone(), Arc::clone(&counter))?),
            Mode::Baseline => None,
        };
        Ok(Self {
            quanv,
            vit: ViT::new("vit", config.vit.clone())?,
            classifier: Classifier::new("classifier", config.fused_width(), &config.classifier),
            counter,
            config,
        })
    }

    /// Replaces the circuit readout (hybrid mode only).
    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.quanv = self.quanv.map(|q| q.with_readout(readout));
        self
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn quanv(&self) -> Option<&QuanvBranch> {
        self.quanv.as_ref()
    }

    pub fn vit(&self) -> &ViT {
        &self.vit
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Circuit executions since construction; always 0 in baseline mode.
    pub fn circuit_evaluations(&self) -> u64 {
        self.counter.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        if let Some(q) = &self.quanv {
            q.init(store, rng)?;
        }
        self.vit.init(store, rng)?;
        self.classifier.init(store, rng)
    }

    /// Fresh parameter store for this model.
    pub fn init_store<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng)?;
        Ok(store)
    }

    pub fn num_params(&self) -> usize {
        self.quanv.as_ref().map_or(0, QuanvBranch::num_params) + self.vit.num_params() + self.classifier.num_params()
    }

    pub fn forward_trace<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<ForwardTrace> {
        let (quantum_map, quantum) = match &self.quanv {
            Some(q) => {
                let t = q.forward_trace(g, store, images)?;
                (Some(t.quantum_map), Some(t.features))
            }
            None => (None, None),
        };
        let context = self.vit.forward(g, store, images)?;
        let fused = match quantum {
            Some(qf) => fuse(g, qf, context, self.config.quanv.feature_dim, self.config.vit.d_model)?,
            None => context,
        };
        let logits = self.classifier.forward(g, store, fused)?;
        Ok(ForwardTrace {
            quantum_map,
            quantum,
            context,
            fused,
            logits,
        })
    }

    /// `[B,3,S,S]` -> logits `[B,classes]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        Ok(self.forward_trace(g, store, images)?.logits)
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Real>(logits: &crate::numerics::Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
