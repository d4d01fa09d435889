//! Graph-network model family.
//!
//! Sequence models are VAEs with latent edge types: a global-frame baseline,
//! the local-frame variant, its origin-augmented form, and the
//! force-augmented variant fed by a neural field. Single-step models (a local
//! frame feedforward network and a velocity EGNN) serve the Lorentz setting.
//! Oracles replace the field with groundtruth forces or sources.

pub mod checkpoint;
pub mod features;
pub mod graph;
pub mod single;
pub mod vae;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::field::{Aggregator, Conditioning, FieldConfig, FieldQuery, NeuralField};
use crate::nn::ParamSet;
use crate::simulate::Setting;

pub use features::{FeatureLayout, FrameKind, StepInputs};
pub use graph::{Batch, Topology};
pub use single::{EgnnNets, FeedforwardNets};
pub use vae::{gumbel_softmax, gumbel_softmax_sample, EdgePosterior, RolloutMode, VaeNets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Global,
    Locs,
    Glocs,
    Aether,
    ForceOracle,
    SourceOracle,
    Feedforward,
    FeedforwardAether,
    ParallelAether,
    Egnn,
    EgnnAether,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Vae,
    Feedforward,
    Egnn,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Global,
        Variant::Locs,
        Variant::Glocs,
        Variant::Aether,
        Variant::ForceOracle,
        Variant::SourceOracle,
        Variant::Feedforward,
        Variant::FeedforwardAether,
        Variant::ParallelAether,
        Variant::Egnn,
        Variant::EgnnAether,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::Locs => "locs",
            Variant::Glocs => "glocs",
            Variant::Aether => "aether",
            Variant::ForceOracle => "force_oracle",
            Variant::SourceOracle => "source_oracle",
            Variant::Feedforward => "feedforward",
            Variant::FeedforwardAether => "feedforward_aether",
            Variant::ParallelAether => "parallel_aether",
            Variant::Egnn => "egnn",
            Variant::EgnnAether => "egnn_aether",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn family(self) -> Family {
        match self {
            Variant::Global
            | Variant::Locs
            | Variant::Glocs
            | Variant::Aether
            | Variant::ForceOracle
            | Variant::SourceOracle => Family::Vae,
            Variant::Feedforward | Variant::FeedforwardAether | Variant::ParallelAether => {
                Family::Feedforward
            }
            Variant::Egnn | Variant::EgnnAether => Family::Egnn,
        }
    }

    /// Owns a trainable neural field.
    pub fn has_field(self) -> bool {
        matches!(
            self,
            Variant::Aether | Variant::FeedforwardAether | Variant::ParallelAether | Variant::EgnnAether
        )
    }

    /// Feeds external forces into the message passing.
    pub fn feeds_forces(self) -> bool {
        matches!(
            self,
            Variant::Aether | Variant::ForceOracle | Variant::FeedforwardAether | Variant::EgnnAether
        )
    }

    pub fn uses_sources(self) -> bool {
        self == Variant::SourceOracle
    }

    /// Needs groundtruth information at prediction time.
    pub fn is_oracle(self) -> bool {
        matches!(self, Variant::ForceOracle | Variant::SourceOracle)
    }

    pub fn layout(self, d: usize, zero_origin: bool) -> FeatureLayout {
        let local = FeatureLayout::local(d);
        match self {
            Variant::Global => FeatureLayout::global(d),
            Variant::Locs | Variant::SourceOracle => local,
            Variant::Glocs => FeatureLayout {
                origin: true,
                zero_origin,
                ..local
            },
            Variant::Aether | Variant::ForceOracle => FeatureLayout {
                origin: true,
                zero_origin,
                forces: true,
                ..local
            },
            Variant::Feedforward | Variant::ParallelAether => FeatureLayout {
                pair_scalars: true,
                ..local
            },
            Variant::FeedforwardAether => FeatureLayout {
                pair_scalars: true,
                forces: true,
                ..local
            },
            // EGNN builds its own scalar inputs
            Variant::Egnn | Variant::EgnnAether => local,
        }
    }
}

/// Spatio-temporal aggregator sizes for dynamic fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub object_dim: usize,
    pub latent_dim: usize,
    /// Leading observed steps summarised into `z`.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d: usize,
    /// Number of latent edge types `K`.
    pub edge_types: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    pub hidden: usize,
    pub lstm_hidden: usize,
    /// Message-passing rounds of the single-step models.
    pub layers: usize,
    /// Fill the origin block with zeros (exactly equivariant G-LoCS).
    #[serde(default)]
    pub zero_origin: bool,
    pub field: Option<FieldConfig>,
    pub aggregator: Option<AggregatorConfig>,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for `variant` on `setting`.
    pub fn for_setting(variant: Variant, setting: Setting) -> Self {
        let d = setting.dim();
        let mut cfg = Self {
            variant,
            d,
            edge_types: 2,
            tau: 0.5,
            hidden: 64,
            lstm_hidden: 32,
            layers: 4,
            zero_origin: false,
            field: None,
            aggregator: None,
            seed: 0,
        };
        if variant.has_field() {
            cfg.field = Some(match setting {
                Setting::Lorentz => FieldConfig::raw_with_charge(d, 32, 16),
                Setting::Electrostatic => FieldConfig::positional(d, 128),
                Setting::Gravity2d | Setting::Gravity3d => {
                    FieldConfig::positional(d, 128).conditioned(Conditioning::Film, 128)
                }
            });
            if !setting.static_field() {
                cfg.aggregator = Some(AggregatorConfig {
                    object_dim: 128,
                    latent_dim: 128,
                    window: setting.input_steps(),
                });
            }
        }
        cfg
    }

    pub fn layout(&self) -> FeatureLayout {
        self.variant.layout(self.d, self.zero_origin)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d != 2 && self.d != 3 {
            return bad(format!("dimension {} not supported", self.d));
        }
        if self.edge_types < 2 {
            return bad("at least two edge types are required".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive".into());
        }
        if self.hidden == 0 || self.lstm_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if self.variant.family() != Family::Vae && self.layers == 0 {
            return bad("single-step models need at least one layer".into());
        }
        match (&self.field, self.variant.has_field()) {
            (None, true) => return bad(format!("variant {} needs a field", self.variant.name())),
            (Some(_), false) => {
                return bad(format!("variant {} has no field", self.variant.name()))
            }
            (Some(f), true) => {
                f.validate()?;
                if f.d != self.d {
                    return bad("field dimension differs from the model's".into());
                }
                let conditional = f.conditioning != Conditioning::None;
                match (&self.aggregator, conditional) {
                    (Some(a), true) if a.latent_dim != f.latent_dim => {
                        return bad("aggregator and field latent widths differ".into())
                    }
                    (Some(a), true) if a.window == 0 || a.object_dim == 0 => {
                        return bad("aggregator window and width must be positive".into())
                    }
                    (None, true) => return bad("a conditional field needs an aggregator".into()),
                    (Some(_), false) => {
                        return bad("aggregator given for an unconditional field".into())
                    }
                    _ => {}
                }
            }
            (None, false) => {
                if self.aggregator.is_some() {
                    return bad("aggregator given without a field".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Body {
    Vae(VaeNets),
    Feedforward(FeedforwardNets),
    Egnn(EgnnNets),
}

/// Parameters plus the network structure that reads them.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub body: Body,
    pub field: Option<NeuralField>,
    pub aggregator: Option<Aggregator>,
}

impl Model {
    /// Fresh model; all randomness comes from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let layout = cfg.layout();
        let body = match cfg.variant.family() {
            Family::Vae => Body::Vae(VaeNets::new(
                &mut ps,
                layout,
                cfg.edge_types,
                cfg.hidden,
                cfg.lstm_hidden,
                cfg.variant.uses_sources(),
                &mut rng,
            )),
            Family::Feedforward => Body::Feedforward(FeedforwardNets::new(
                &mut ps,
                layout,
                cfg.hidden,
                cfg.layers,
                &mut rng,
            )),
            Family::Egnn => Body::Egnn(EgnnNets::new(
                &mut ps,
                cfg.d,
                cfg.hidden,
                cfg.layers,
                cfg.variant.feeds_forces(),
                &mut rng,
            )),
        };
        let field = match &cfg.field {
            Some(f) => Some(NeuralField::new(&mut ps, "field", f.clone(), &mut rng)?),
            None => None,
        };
        let aggregator = cfg
            .aggregator
            .map(|a| Aggregator::new(&mut ps, "agg", cfg.d, a.object_dim, a.latent_dim, &mut rng));
        Ok(Self {
            cfg,
            params: ps,
            body,
            field,
            aggregator,
        })
    }

    /// A model of `cfg` carrying the weights of `smaller`, a variant with a
    /// subset of the inputs. Input layers gain zero rows for the extra
    /// (trailing) input columns; parameters without a counterpart keep their
    /// fresh values.
    pub fn from_smaller(cfg: ModelConfig, smaller: &Model) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        for src in smaller.params.entries() {
            let id = model.params.find(&src.name).ok_or_else(|| {
                Error::Config(format!("parameter {} has no counterpart", src.name))
            })?;
            let (sr, sc) = src.value.dim();
            let (dr, dc) = model.params.get(id).dim();
            if sc != dc || sr > dr {
                return Err(Error::Shape(format!(
                    "cannot embed {} [{sr}, {sc}] into [{dr}, {dc}]",
                    src.name
                )));
            }
            let mut v = Mat::zeros((dr, dc));
            v.slice_mut(ndarray::s![..sr, ..]).assign(&src.value);
            model.params.set(id, v);
        }
        Ok(model)
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Makes the field predict zero everywhere.
    pub fn zero_field(&mut self) {
        if let Some(f) = &self.field {
            f.zero_output(&mut self.params);
        }
    }

    /// Latent field code of every system, `[S, D_z]`, from the leading
    /// window of `observed`.
    pub fn latent(&self, g: &Graph, batch: &Batch, observed: &[Mat]) -> Result<Option<Var>> {
        let Some(agg) = &self.aggregator else {
            return Ok(None);
        };
        let w = self.cfg.aggregator.unwrap().window.min(observed.len());
        if w == 0 {
            return Err(Error::InvalidInput("no observed steps for the latent code".into()));
        }
        let states: Vec<Var> = observed[..w].iter().map(|m| g.constant(m.clone())).collect();
        Ok(Some(agg.forward(g, &states, batch.systems)?))
    }

    /// External forces on every row of `states` (one or more stacked
    /// `[S·N, 2d]` blocks): the field's prediction, the groundtruth for the
    /// force oracle, nothing otherwise.
    pub fn external_forces(
        &self,
        g: &Graph,
        batch: &Batch,
        states: &Mat,
        latent: Option<Var>,
    ) -> Result<Option<Var>> {
        if self.variant() == Variant::ForceOracle {
            return Ok(Some(g.constant(batch.true_forces(states)?)));
        }
        let Some(field) = &self.field else {
            return Ok(None);
        };
        let d = self.cfg.d;
        let nodes = batch.systems * batch.n;
        let rows = states.nrows();
        if states.ncols() != 2 * d || rows % nodes != 0 {
            return Err(Error::Shape(format!("states {:?} for this batch", states.dim())));
        }
        let p = g.constant(states.slice(ndarray::s![.., ..d]).to_owned());
        let u = field
            .cfg
            .uses_velocity()
            .then(|| g.constant(states.slice(ndarray::s![.., d..]).to_owned()));
        let charge = field
            .cfg
            .uses_charge()
            .then(|| (0..rows).map(|r| batch.charges[r % nodes]).collect());
        let z = match (field.is_conditional(), latent) {
            (true, Some(z)) => {
                let idx: std::rc::Rc<[usize]> = (0..rows).map(|r| (r % nodes) / batch.n).collect();
                Some(g.gather_rows(z, idx))
            }
            (true, None) => return Err(Error::Config("dynamic field needs a latent code".into())),
            (false, _) => None,
        };
        let q = FieldQuery {
            p,
            u,
            omega_hat: None,
            charge,
        };
        Ok(Some(field.forward(g, &q, z)?))
    }

    /// Sources per system when the variant consumes them.
    pub fn sources<'a>(&self, batch: &'a Batch) -> Result<Option<&'a [(Mat, Vec<f64>)]>> {
        if !self.variant().uses_sources() {
            return Ok(None);
        }
        if batch.sources.len() != batch.systems {
            return Err(Error::Config("the source oracle needs groundtruth sources".into()));
        }
        Ok(Some(&batch.sources))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_round_trip_through_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
    }

    #[test]
    fn config_rejects_bad_edge_types_and_tau() {
        let mut cfg = ModelConfig::for_setting(Variant::Locs, Setting::Electrostatic);
        cfg.edge_types = 1;
        assert!(cfg.validate().is_err());
        cfg.edge_types = 2;
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn field_presence_follows_variant() {
        for v in Variant::ALL {
            for s in [Setting::Electrostatic, Setting::Gravity2d, Setting::Lorentz] {
                let cfg = ModelConfig::for_setting(v, s);
                assert!(cfg.validate().is_ok(), "{} on {}", v.name(), s.name());
                assert_eq!(cfg.field.is_some(), v.has_field());
            }
        }
    }
}
