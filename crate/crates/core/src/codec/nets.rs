use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};

use super::layers::{constant_planes, Conv, Linear, LEAK};
use super::params::{Bound, ParamStore};
use super::{CodecConfig, CodecError, Z_CHANNELS, Z_SIDE};

/// Channels of the view-conditioning grid fed to appearance decoders.
pub const OMEGA_CHANNELS: usize = 16;
/// `ω` is divided by this before the linear layer so typical camera
/// distances land near unit scale.
pub const OMEGA_SCALE: f64 = 100.0;
pub const APPEARANCE_CHANNELS: usize = 4;

/// Convolutional trunk over `[T_neu, G_neu]` with one feature map per
/// decoder level. Features are returned coarse to fine, matching decoder
/// level order (8×8 first).
#[derive(Clone, Debug)]
struct Trunk {
    stem: Conv,
    down: Vec<Conv>,
}

impl Trunk {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &CodecConfig) -> Self {
        let widths = &cfg.widths;
        let levels = widths.len();
        let stem = Conv::new(store, rng, &format!("{name}.stem"), 6, widths[levels - 1], 3, 1, false);
        let down = (1..levels)
            .map(|i| {
                let from = widths[levels - i];
                let to = widths[levels - i - 1];
                Conv::new(store, rng, &format!("{name}.down{i}"), from, to, 3, 2, false)
            })
            .collect();
        Self { stem, down }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Vec<Var>, CodecError> {
        let mut h = self.stem.forward(tape, p, x)?;
        h = tape.leaky_relu(h, LEAK);
        let mut feats = vec![h];
        for conv in &self.down {
            let y = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(y, LEAK);
            feats.push(h);
        }
        feats.reverse();
        Ok(feats)
    }
}

/// Per-level zero-initialised 1×1 heads producing decoder bias maps.
#[derive(Clone, Debug)]
struct BiasHeads(Vec<Conv>);

impl BiasHeads {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, widths: &[usize]) -> Self {
        Self(
            widths
                .iter()
                .enumerate()
                .map(|(l, &w)| Conv::new(store, rng, &format!("{name}.theta{l}"), w, w, 1, 1, true))
                .collect(),
        )
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, feats: &[Var]) -> Result<Vec<Var>, CodecError> {
        self.0.iter().zip(feats).map(|(c, &f)| c.forward(tape, p, f)).collect()
    }
}

/// Identity hypernetwork of the mesh branch.
#[derive(Clone, Debug)]
pub struct Hypernet {
    trunk: Trunk,
    f_head: Option<Conv>,
    d_head: Conv,
    theta_g: BiasHeads,
    theta_e: BiasHeads,
}

/// Outputs of [`Hypernet::forward`]; maps are `[1,C,H,W]`.
#[derive(Clone, Debug)]
pub struct IdentityConditioning {
    /// Neutral texture (3 channels) followed by the learned encoding.
    pub f: Var,
    pub d: Var,
    pub theta_g: Vec<Var>,
    pub theta_e: Vec<Var>,
}

impl Hypernet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &CodecConfig) -> Self {
        let fine = *cfg.widths.last().unwrap();
        Self {
            trunk: Trunk::new(store, rng, name, cfg),
            f_head: (cfg.f_channels > 0)
                .then(|| Conv::new(store, rng, &format!("{name}.f"), fine, cfg.f_channels, 3, 1, false)),
            d_head: Conv::new(store, rng, &format!("{name}.d"), fine, 3, 3, 1, true),
            theta_g: BiasHeads::new(store, rng, &format!("{name}.g"), &cfg.widths),
            theta_e: BiasHeads::new(store, rng, &format!("{name}.e"), &cfg.widths),
        }
    }

    /// `tex` and `geo` are `[3,H,W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tex: &Tensor, geo: &Tensor) -> Result<IdentityConditioning, CodecError> {
        let (x, t) = assets_input(tape, tex, geo)?;
        let feats = self.trunk.forward(tape, p, x)?;
        let fine = *feats.last().unwrap();
        let f = match &self.f_head {
            Some(head) => {
                let learned = head.forward(tape, p, fine)?;
                tape.concat(&[t, learned], 1)?
            }
            None => t,
        };
        Ok(IdentityConditioning {
            f,
            d: self.d_head.forward(tape, p, fine)?,
            theta_g: self.theta_g.forward(tape, p, &feats)?,
            theta_e: self.theta_e.forward(tape, p, &feats)?,
        })
    }
}

/// `[1,6,H,W]` stack of texture and geometry (geometry scaled to roughly
/// unit range), plus the texture alone as `[1,3,H,W]`.
fn assets_input(tape: &mut Tape, tex: &Tensor, geo: &Tensor) -> Result<(Var, Var), CodecError> {
    let s = tex.shape();
    if s.len() != 3 || s[0] != 3 || geo.shape() != s {
        return Err(CodecError::AssetShape(s.to_vec(), geo.shape().to_vec()));
    }
    let (h, w) = (s[1], s[2]);
    let t = tape.constant(tex.clone().reshaped(&[1, 3, h, w])?);
    let g = tape.constant(geo.map(|v| v / GEO_SCALE).reshaped(&[1, 3, h, w])?);
    Ok((tape.concat(&[t, g], 1)?, t))
}

/// Geometry maps (cm) are divided by this where they enter a network.
pub const GEO_SCALE: f64 = 10.0;

/// Identity hypernetwork of the Gaussian branch: mean colour map and
/// decoder biases.
#[derive(Clone, Debug)]
pub struct GaussianHypernet {
    trunk: Trunk,
    color_head: Conv,
    theta: BiasHeads,
}

#[derive(Clone, Debug)]
pub struct GaussianConditioning {
    /// `[1,3,H,W]`, equal to the neutral texture at initialisation.
    pub color_mean: Var,
    pub theta: Vec<Var>,
}

impl GaussianHypernet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &CodecConfig) -> Self {
        let fine = *cfg.widths.last().unwrap();
        Self {
            trunk: Trunk::new(store, rng, name, cfg),
            color_head: Conv::new(store, rng, &format!("{name}.color"), fine, 3, 3, 1, true),
            theta: BiasHeads::new(store, rng, &format!("{name}.theta"), &cfg.widths),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, tex: &Tensor, geo: &Tensor) -> Result<GaussianConditioning, CodecError> {
        let (x, t) = assets_input(tape, tex, geo)?;
        let feats = self.trunk.forward(tape, p, x)?;
        let delta = self.color_head.forward(tape, p, *feats.last().unwrap())?;
        Ok(GaussianConditioning {
            color_mean: tape.add(t, delta)?,
            theta: self.theta.forward(tape, p, &feats)?,
        })
    }
}

/// Strided encoder from expression deltas to `(μ, log σ)` at 4×4.
#[derive(Clone, Debug)]
pub struct ExpressionEncoder {
    convs: Vec<Conv>,
    mu: Conv,
    log_sigma: Conv,
    pub in_channels: usize,
}

impl ExpressionEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_channels: usize, cfg: &CodecConfig) -> Self {
        let levels = cfg.widths.len();
        let mut convs = Vec::new();
        let mut cin = in_channels;
        // output of conv i sits at resolution H / 2^(i+1); the last one at 4×4
        for i in 0..levels {
            let cout = if i + 1 < levels { cfg.widths[levels - 2 - i] } else { cfg.widths[0] };
            convs.push(Conv::new(store, rng, &format!("{name}.conv{i}"), cin, cout, 3, 2, false));
            cin = cout;
        }
        Self {
            mu: Conv::new(store, rng, &format!("{name}.mu"), cin, Z_CHANNELS, 1, 1, false),
            log_sigma: Conv::new(store, rng, &format!("{name}.logsigma"), cin, Z_CHANNELS, 1, 1, true),
            convs,
            in_channels,
        }
    }

    /// `x` is `[1,C,H,W]`; returns `(μ, log σ)` each `[1,16,4,4]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var), CodecError> {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(tape, p, h)?;
            h = tape.leaky_relu(y, LEAK);
        }
        Ok((self.mu.forward(tape, p, h)?, self.log_sigma.forward(tape, p, h)?))
    }
}

/// Upsampling decoder from the 4×4 code to an `H×W` map.
#[derive(Clone, Debug)]
pub struct UpDecoder {
    convs: Vec<Conv>,
    head: Conv,
    omega: Option<Linear>,
    plane_count: usize,
}

/// Per-call inputs of an [`UpDecoder`].
pub struct DecoderInputs<'a> {
    /// Expression code `[1,16,4,4]`; `None` severs the input (zeros).
    pub z: Option<Var>,
    /// Values broadcast as constant 4×4 planes (poses).
    pub planes: &'a [f64],
    /// View vector `ω`, for decoders built with view conditioning.
    pub omega: Option<[f64; 3]>,
    pub theta: &'a [Var],
}

impl UpDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &CodecConfig,
        plane_count: usize,
        with_omega: bool,
        out: usize,
    ) -> Self {
        let mut convs = Vec::new();
        let mut cin = Z_CHANNELS + plane_count;
        for (l, &w) in cfg.widths.iter().enumerate() {
            let extra = if l == 0 && with_omega { OMEGA_CHANNELS } else { 0 };
            convs.push(Conv::new(store, rng, &format!("{name}.up{l}"), cin + extra, w, 3, 1, false));
            cin = w;
        }
        let omega = with_omega.then(|| Linear::new(store, rng, &format!("{name}.omega"), 3, OMEGA_CHANNELS * 64, false));
        Self {
            head: Conv::new(store, rng, &format!("{name}.head"), cin, out, 1, 1, true),
            convs,
            omega,
            plane_count,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, inp: &DecoderInputs) -> Result<Var, CodecError> {
        if inp.planes.len() != self.plane_count {
            return Err(CodecError::PlaneCount { expected: self.plane_count, found: inp.planes.len() });
        }
        if inp.theta.len() != self.convs.len() {
            return Err(CodecError::LevelCount { expected: self.convs.len(), found: inp.theta.len() });
        }
        let z = match inp.z {
            Some(z) => z,
            None => tape.constant(Tensor::zeros(&[1, Z_CHANNELS, Z_SIDE, Z_SIDE])),
        };
        let mut h = if self.plane_count > 0 {
            let planes = constant_planes(tape, inp.planes, Z_SIDE, Z_SIDE);
            tape.concat(&[z, planes], 1)?
        } else {
            z
        };
        for (l, conv) in self.convs.iter().enumerate() {
            h = tape.upsample2x(h)?;
            if l == 0 {
                if let Some(lin) = &self.omega {
                    let w = inp.omega.ok_or(CodecError::MissingOmega)?;
                    let row = tape.constant(Tensor::new(vec![1, 3], w.iter().map(|v| v / OMEGA_SCALE).collect())?);
                    let grid = lin.forward(tape, p, row)?;
                    let grid = tape.reshape(grid, &[1, OMEGA_CHANNELS, 8, 8])?;
                    h = tape.concat(&[h, grid], 1)?;
                }
            }
            let y = conv.forward(tape, p, h)?;
            let y = tape.add(y, inp.theta[l])?;
            h = tape.leaky_relu(y, LEAK);
        }
        self.head.forward(tape, p, h)
    }

    /// The `16×8×8` view grid for a given `ω` (plain values).
    pub fn omega_grid(&self, p: &ParamStore, omega: [f64; 3]) -> Option<Tensor> {
        let lin = self.omega.as_ref()?;
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let row = tape.constant(Tensor::new(vec![1, 3], omega.iter().map(|v| v / OMEGA_SCALE).collect()).ok()?);
        let g = lin.forward(&mut tape, &b, row).ok()?;
        tape.value(g).clone().reshaped(&[OMEGA_CHANNELS, 8, 8]).ok()
    }
}

/// Per-pixel MLP shared across identities.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    layers: Vec<Linear>,
    pub in_features: usize,
}

impl PixelDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_features: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut cin = in_features;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, rng, &format!("{name}.fc{i}"), cin, h, false));
            cin = h;
        }
        layers.push(Linear::new(store, rng, &format!("{name}.out"), cin, 3, true));
        Self { layers, in_features }
    }

    /// `[P, in] → [P, 3]` colours in `(0,1)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, CodecError> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, LEAK);
            }
        }
        Ok(tape.sigmoid(h))
    }
}
