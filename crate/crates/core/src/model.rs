//! Model configuration, ablation variants, and the end-to-end forward pass
//! wiring the decouple, recouple and detection modules together.

use serde::{Deserialize, Serialize};

use crate::decouple::{self, DecoupledFeatures};
use crate::detect::{self, HeadOutput, TargetMap};
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::recouple::{self, RecoupleInputs};
use crate::scenesim::{Grid, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Camera,
    Lidar,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Camera => Modality::Lidar,
            Modality::Lidar => Modality::Camera,
        }
    }
}

/// Form of the invariant/specific orthogonality penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffForm {
    #[default]
    Squared,
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterMode {
    #[default]
    PerCell,
    PerSample,
}

/// What the auxiliary head sees during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxInput {
    /// The shared head on `F_ic` and on `F_il`, losses averaged.
    #[default]
    Separate,
    /// The head once on `(F_ic + F_il) / 2`.
    Combined,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    #[default]
    Full,
    NoDecouple,
    NoRecouple,
    TightConcatBaseline,
    NoAuxHead,
    HardTop1Routing,
    SharedExpertInput,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Full,
        ModelVariant::NoDecouple,
        ModelVariant::NoRecouple,
        ModelVariant::TightConcatBaseline,
        ModelVariant::NoAuxHead,
        ModelVariant::HardTop1Routing,
        ModelVariant::SharedExpertInput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::NoDecouple => "no-decouple",
            ModelVariant::NoRecouple => "no-recouple",
            ModelVariant::TightConcatBaseline => "tight-concat-baseline",
            ModelVariant::NoAuxHead => "no-aux-head",
            ModelVariant::HardTop1Routing => "hard-top1-routing",
            ModelVariant::SharedExpertInput => "shared-expert-input",
        }
    }

    pub fn has_decouple(self) -> bool {
        !matches!(self, ModelVariant::NoDecouple | ModelVariant::TightConcatBaseline)
    }

    pub fn has_recouple(self) -> bool {
        !matches!(self, ModelVariant::NoRecouple | ModelVariant::TightConcatBaseline)
    }

    pub fn has_aux(self) -> bool {
        self.has_decouple() && self != ModelVariant::NoAuxHead
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// `C`
    pub camera_channels: usize,
    /// `D`
    pub lidar_channels: usize,
    /// `I`
    pub invariant_channels: usize,
    /// `S`
    pub specific_channels: usize,
    pub grid_x: usize,
    pub grid_y: usize,
    /// `M`
    pub heads: usize,
    /// `N`
    pub points: usize,
    pub decouple_layers: usize,
    pub recouple_layers: usize,
    /// `F`
    pub fused_channels: usize,
    pub num_classes: usize,
    pub camera_in: usize,
    pub lidar_in: usize,
    pub head_hidden: usize,
    pub router_hidden: usize,
    pub ffn_hidden: usize,
    pub diff_form: DiffForm,
    pub router_mode: RouterMode,
    pub aux_input: AuxInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_sim(&SimConfig::default())
    }
}

impl ModelConfig {
    /// Desk-scale defaults with input sizes taken from the simulator.
    pub fn for_sim(sim: &SimConfig) -> Self {
        Self {
            variant: ModelVariant::Full,
            camera_channels: 8,
            lidar_channels: 8,
            invariant_channels: 8,
            specific_channels: 8,
            grid_x: sim.grid_x,
            grid_y: sim.grid_y,
            heads: 2,
            points: 4,
            decouple_layers: 1,
            recouple_layers: 1,
            fused_channels: 16,
            num_classes: sim.num_classes,
            camera_in: sim.camera_channels(),
            lidar_in: sim.lidar_channels(),
            head_hidden: 8,
            router_hidden: 16,
            ffn_hidden: 16,
            diff_form: DiffForm::Squared,
            router_mode: RouterMode::PerCell,
            aux_input: AuxInput::Separate,
        }
    }

    pub fn modality_channels(&self, m: Modality) -> usize {
        match m {
            Modality::Camera => self.camera_channels,
            Modality::Lidar => self.lidar_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("camera_channels", self.camera_channels),
            ("lidar_channels", self.lidar_channels),
            ("invariant_channels", self.invariant_channels),
            ("specific_channels", self.specific_channels),
            ("grid_x", self.grid_x),
            ("grid_y", self.grid_y),
            ("heads", self.heads),
            ("points", self.points),
            ("decouple_layers", self.decouple_layers),
            ("recouple_layers", self.recouple_layers),
            ("fused_channels", self.fused_channels),
            ("num_classes", self.num_classes),
            ("camera_in", self.camera_in),
            ("lidar_in", self.lidar_in),
            ("head_hidden", self.head_hidden),
            ("router_hidden", self.router_hidden),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !self.specific_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "specific_channels ({}) must be divisible by heads ({})",
                self.specific_channels, self.heads
            )));
        }
        if self.variant.has_decouple() && self.invariant_channels != self.specific_channels {
            return Err(Error::Config(format!(
                "invariant_channels ({}) must equal specific_channels ({})",
                self.invariant_channels, self.specific_channels
            )));
        }
        Ok(())
    }

    pub fn check_sim(&self, sim: &SimConfig) -> Result<()> {
        let want = (sim.grid_x, sim.grid_y, sim.camera_channels(), sim.lidar_channels(), sim.num_classes);
        let have = (self.grid_x, self.grid_y, self.camera_in, self.lidar_in, self.num_classes);
        if want != have {
            return Err(Error::Config(format!(
                "model expects (grid_x, grid_y, camera_in, lidar_in, classes) = {have:?}, simulator gives {want:?}"
            )));
        }
        Ok(())
    }
}

/// Whether the auxiliary head is built. Evaluation graphs never contain it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Train,
    Eval,
}

/// Handles into one forward graph.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub head: HeadOutput,
    /// Encoder outputs `F_c`, `F_l`.
    pub encoded: (Var, Var),
    pub decoupled: Option<DecoupledFeatures>,
    /// Router output `[3, X, Y]`.
    pub router: Option<Var>,
    pub fused: Var,
}

/// Loss coefficients and the sign of the routing entropy term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sim: f64,
    pub diff: f64,
    pub reg: f64,
    pub aux: f64,
    /// `+1` adds the entropy (sharpens routing); `-1` subtracts it.
    pub reg_sign: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sim: 0.1,
            diff: 0.1,
            reg: 0.01,
            aux: 0.5,
            reg_sign: 1.0,
        }
    }
}

/// Scalar components of one sample's objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub det: Var,
    pub sim: Option<Var>,
    pub diff: Option<Var>,
    pub reg: Option<Var>,
    pub aux: Option<Var>,
}

pub const LOSS_COMPONENTS: [&str; 6] = ["total", "det", "sim", "diff", "reg", "aux"];

impl LossTerms {
    /// Values in [`LOSS_COMPONENTS`] order; inactive terms are zero.
    pub fn values<T: Real>(&self, g: &Graph<T>) -> [f64; 6] {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x).to_f64_lossy());
        [
            v(Some(self.total)),
            v(Some(self.det)),
            v(self.sim),
            v(self.diff),
            v(self.reg),
            v(self.aux),
        ]
    }
}

pub fn grid_tensor<T: Real>(grid: &Grid) -> Tensor<T> {
    Tensor::new(
        grid.data.iter().map(|&v| T::of(v as f64)).collect(),
        &[grid.channels, grid.x, grid.y],
    )
    .expect("grid shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn variant(&self) -> ModelVariant {
        self.cfg.variant
    }

    /// Seeded initial parameters for this variant.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f64>> {
        let cfg = &self.cfg;
        let v = cfg.variant;
        let mut init = Init::new(seed);
        decouple::declare_input_encoders(&mut init, cfg)?;
        if v == ModelVariant::TightConcatBaseline {
            init.conv("fuser.conv", cfg.fused_channels, cfg.camera_channels + cfg.lidar_channels, 3)?;
        } else {
            if v.has_decouple() {
                decouple::declare_invariant(&mut init, cfg)?;
                decouple::declare_specific(&mut init, cfg, Modality::Camera)?;
                decouple::declare_specific(&mut init, cfg, Modality::Lidar)?;
            } else {
                init.conv_plain("nodec.proj_cam", cfg.specific_channels, cfg.camera_channels, 1)?;
                init.conv_plain("nodec.proj_lidar", cfg.specific_channels, cfg.lidar_channels, 1)?;
            }
            if v.has_recouple() {
                recouple::declare_recouple(&mut init, cfg, v.has_decouple())?;
                recouple::declare_experts(&mut init, cfg, v == ModelVariant::SharedExpertInput)?;
                recouple::declare_router(&mut init, cfg)?;
            } else {
                let c_in = 2 * cfg.invariant_channels + 2 * cfg.specific_channels;
                init.conv("norec.fuse", cfg.fused_channels, c_in, 3)?;
            }
        }
        detect::declare_head(&mut init, "head", cfg.fused_channels, cfg.head_hidden, cfg.num_classes)?;
        if v.has_aux() {
            detect::declare_head(
                &mut init,
                detect::AUX_HEAD,
                cfg.invariant_channels,
                cfg.head_hidden,
                cfg.num_classes,
            )?;
        }
        Ok(init.finish())
    }

    /// Checks that `params` has exactly this variant's names and shapes.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let reference = self.init_params(0)?;
        let missing: Vec<String> = reference
            .sorted_names()
            .filter(|n| params.get(n).is_none())
            .map(str::to_string)
            .collect();
        let unexpected: Vec<String> = params
            .sorted_names()
            .filter(|n| reference.get(n).is_none())
            .map(str::to_string)
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::ParamMismatch { missing, unexpected });
        }
        for (name, t) in reference.iter() {
            let found = params.get(name).expect("checked").shape();
            if found != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    found: found.to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        camera: &Grid,
        lidar: &Grid,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let want_c = [cfg.camera_in, cfg.grid_x, cfg.grid_y];
        let want_l = [cfg.lidar_in, cfg.grid_x, cfg.grid_y];
        if [camera.channels, camera.x, camera.y] != want_c || [lidar.channels, lidar.x, lidar.y] != want_l {
            return Err(Error::Config(format!(
                "render shapes camera {:?} / lidar {:?} do not match model {want_c:?} / {want_l:?}",
                [camera.channels, camera.x, camera.y],
                [lidar.channels, lidar.x, lidar.y]
            )));
        }
        let cam = g.constant(grid_tensor(camera));
        let lid = g.constant(grid_tensor(lidar));
        let (f_c, f_l) = decouple::input_encode(g, p, cam, lid)?;
        let v = cfg.variant;
        if v == ModelVariant::TightConcatBaseline {
            let cat = g.concat(&[f_c, f_l])?;
            let fused = nn::conv_relu(g, p, "fuser.conv", cat)?;
            return Ok(Forward {
                head: detect::head_forward(g, p, "head", fused)?,
                encoded: (f_c, f_l),
                decoupled: None,
                router: None,
                fused,
            });
        }
        let decoupled = if v.has_decouple() {
            let (ic, il) = decouple::invariant_encode(g, p, f_c, f_l)?;
            let sc = decouple::specific_encode(g, p, cfg, Modality::Camera, f_c)?;
            let sl = decouple::specific_encode(g, p, cfg, Modality::Lidar, f_l)?;
            Some(DecoupledFeatures {
                invariant_camera: ic,
                invariant_lidar: il,
                specific_camera: sc,
                specific_lidar: sl,
            })
        } else {
            None
        };
        let (fused, router) = if v.has_recouple() {
            let (q_c, q_l) = match &decoupled {
                Some(d) => (d.specific_camera, d.specific_lidar),
                None => (
                    nn::conv(g, p, "nodec.proj_cam", f_c)?,
                    nn::conv(g, p, "nodec.proj_lidar", f_l)?,
                ),
            };
            let (enh_c, enh_l) = recouple::cross_recouple(
                g,
                p,
                cfg,
                RecoupleInputs {
                    camera_query: q_c,
                    lidar_query: q_l,
                    camera_feature: f_c,
                    lidar_feature: f_l,
                    invariant: decoupled.map(|d| (d.invariant_camera, d.invariant_lidar)),
                },
            )?;
            let experts = recouple::expert_forward(g, p, enh_c, enh_l, v == ModelVariant::SharedExpertInput)?;
            let w = recouple::router_weights(g, p, cfg, enh_c, enh_l)?;
            let fused = if v == ModelVariant::HardTop1Routing {
                recouple::fuse_top1(g, experts, w)?
            } else {
                recouple::fuse(g, experts, w)?
            };
            (fused, Some(w))
        } else {
            let d = decoupled.expect("no-recouple keeps the decouple module");
            let cat = g.concat(&[d.invariant_camera, d.invariant_lidar, d.specific_camera, d.specific_lidar])?;
            (nn::conv_relu(g, p, "norec.fuse", cat)?, None)
        };
        Ok(Forward {
            head: detect::head_forward(g, p, "head", fused)?,
            encoded: (f_c, f_l),
            decoupled,
            router,
            fused,
        })
    }

    /// Training objective of one sample:
    /// `det + sim*L_sim + diff*L_diff + reg_sign*reg*L_reg + aux*L_aux`,
    /// with terms the variant lacks left out.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        fwd: &Forward,
        target: &TargetMap,
        w: &LossWeights,
    ) -> Result<LossTerms> {
        let det = detect::detection_loss(g, &fwd.head, target)?.total;
        let mut total = det;
        let mut add = |g: &mut Graph<T>, term: Var, coef: f64| -> Result<()> {
            let s = g.scale(term, T::of(coef));
            total = g.add(total, s)?;
            Ok(())
        };
        let (mut sim, mut diff, mut reg, mut aux) = (None, None, None, None);
        if let Some(d) = &fwd.decoupled {
            let s = decouple::loss_sim(g, d.invariant_camera, d.invariant_lidar)?;
            add(g, s, w.sim)?;
            let df = decouple::loss_diff(
                g,
                d.invariant_camera,
                d.specific_camera,
                d.invariant_lidar,
                d.specific_lidar,
                self.cfg.diff_form,
            )?;
            add(g, df, w.diff)?;
            sim = Some(s);
            diff = Some(df);
            if self.cfg.variant.has_aux() {
                let a = detect::aux_invariant_loss(
                    g,
                    p,
                    d.invariant_camera,
                    d.invariant_lidar,
                    target,
                    self.cfg.aux_input,
                )?;
                add(g, a, w.aux)?;
                aux = Some(a);
            }
        }
        if let Some(weights) = fwd.router {
            let r = recouple::loss_entropy(g, weights)?;
            add(g, r, w.reg_sign * w.reg)?;
            reg = Some(r);
        }
        Ok(LossTerms {
            total,
            det,
            sim,
            diff,
            reg,
            aux,
        })
    }
}
