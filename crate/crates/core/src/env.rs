//! Two-region mask selection environment: tinted state rendering, the two
//! actions and the +/-1 reward.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::candidates::MaskPair;
use crate::imaging::{ImageRecord, Mask};
use crate::nn::Tensor4;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// The fiducial lies inside the displayed region.
    Inside = 1,
    /// The fiducial lies in the complement.
    Outside = 2,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Inside, Action::Outside];

    /// Zero-based output node of the Q network.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Action::Inside),
            1 => Ok(Action::Outside),
            _ => Err(Error::InvalidArgument(format!("action index {i} out of range"))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tint {
    Red,
    Green,
}

impl Tint {
    fn channel(self) -> usize {
        match self {
            Tint::Red => 0,
            Tint::Green => 1,
        }
    }

    /// Tint of the state following `action`.
    pub fn after(action: Action) -> Self {
        match action {
            Action::Inside => Tint::Red,
            Action::Outside => Tint::Green,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub horizon: usize,
    pub tint_alpha: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { horizon: 5, tint_alpha: 0.5 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(self.tint_alpha > 0.0 && self.tint_alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("tint_alpha {} outside (0, 1]", self.tint_alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub image_id: String,
    pub tensor: Arc<Tensor4<f32>>,
    pub tint: Tint,
    pub step_index: usize,
}

impl EnvState {
    /// Debug render of the state raster.
    pub fn to_png(&self, path: &Path) -> Result<()> {
        tensor_to_rgb(&self.tensor)?.save(path)?;
        Ok(())
    }
}

/// Blend the named channel of the masked pixels toward 1.0 with weight `alpha`.
pub fn render_state(base: &Tensor4<f32>, mask: &Mask, tint: Tint, alpha: f64) -> Result<Tensor4<f32>> {
    let [n, c, h, w] = base.shape();
    if n != 1 || c != 3 || h != mask.height() || w != mask.width() {
        return Err(Error::shape("render_state", format!("image {n}x{c}x{h}x{w} vs mask {}x{}", mask.height(), mask.width())));
    }
    let mut out = base.clone();
    let plane = tint.channel() * h * w;
    let data = out.data_mut();
    for (i, &inside) in mask.data().iter().enumerate() {
        if inside {
            let v = f64::from(data[plane + i]);
            data[plane + i] = (alpha + (1.0 - alpha) * v) as f32;
        }
    }
    Ok(out)
}

/// +1 when the action's claim about the fiducial is true, -1 otherwise.
pub fn reward(action: Action, pair: &MaskPair) -> f64 {
    let inside = pair.mask.contains(pair.fiducial);
    match (action, inside) {
        (Action::Inside, true) | (Action::Outside, false) => 1.0,
        _ => -1.0,
    }
}

/// Region claimed by `action`.
pub fn predicted_mask(action: Action, pair: &MaskPair) -> &Mask {
    match action {
        Action::Inside => &pair.mask,
        Action::Outside => &pair.complement,
    }
}

/// Environment for one image and mask pair. Both tinted renders are computed
/// once and shared by every state.
#[derive(Clone, Debug)]
pub struct Environment {
    pub config: EnvConfig,
    pub pair: MaskPair,
    red: Arc<Tensor4<f32>>,
    green: Arc<Tensor4<f32>>,
}

impl Environment {
    pub fn new(image: &ImageRecord, pair: MaskPair, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if image.width() != pair.mask.width() || image.height() != pair.mask.height() {
            return Err(Error::shape(
                "environment",
                format!(
                    "image {} is {}x{} but its mask is {}x{}",
                    image.id,
                    image.width(),
                    image.height(),
                    pair.mask.width(),
                    pair.mask.height()
                ),
            ));
        }
        let base = image.to_tensor::<f32>();
        let red = Arc::new(render_state(&base, &pair.mask, Tint::Red, config.tint_alpha)?);
        let green = Arc::new(render_state(&base, &pair.mask, Tint::Green, config.tint_alpha)?);
        Ok(Self { config, pair, red, green })
    }

    fn render(&self, tint: Tint) -> Arc<Tensor4<f32>> {
        match tint {
            Tint::Red => Arc::clone(&self.red),
            Tint::Green => Arc::clone(&self.green),
        }
    }

    pub fn reset(&self) -> EnvState {
        EnvState { image_id: self.pair.image_id.clone(), tensor: self.render(Tint::Red), tint: Tint::Red, step_index: 1 }
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<(EnvState, f64)> {
        if state.step_index > self.config.horizon {
            return Err(Error::InvalidArgument(format!(
                "step {} is past the horizon of {}",
                state.step_index, self.config.horizon
            )));
        }
        let tint = Tint::after(action);
        let next = EnvState {
            image_id: state.image_id.clone(),
            tensor: self.render(tint),
            tint,
            step_index: state.step_index + 1,
        };
        Ok((next, reward(action, &self.pair)))
    }
}

fn tensor_to_rgb(t: &Tensor4<f32>) -> Result<RgbImage> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 3 {
        return Err(Error::shape("tensor_to_rgb", format!("{n}x{c}x{h}x{w}")));
    }
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}
