//! Click corrections, the ternary correction map and the disk guidance map.
//!
//! Clicks live in model-resolution coordinates. Guidance channels are exact
//! `{0, 1}` disks: a pixel belongs to a click's disk when its squared lattice
//! distance to the click is at most `radius²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value of an uncorrected pixel in the correction map.
pub const UNLABELLED: f64 = -1.0;

/// Default disk radius for guidance encoding.
pub const DEFAULT_RADIUS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Target value in the correction map.
    pub fn target(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }

    pub fn from_mask_value(v: f64) -> Self {
        if v >= 0.5 {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub label: Label,
}

impl Click {
    pub fn new(row: usize, col: usize, label: Label) -> Self {
        Self { row, col, label }
    }

    pub fn positive(row: usize, col: usize) -> Self {
        Self::new(row, col, Label::Positive)
    }

    pub fn negative(row: usize, col: usize) -> Self {
        Self::new(row, col, Label::Negative)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::OutOfBounds {
                row: self.row,
                col: self.col,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// Ordered click history plus the ternary map it induces.
///
/// The map holds 1 for positive, 0 for negative and −1 for uncorrected
/// pixels. A later click on an already-corrected pixel overwrites its value;
/// both clicks stay in the history.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionState {
    clicks: Vec<Click>,
    initial: Vec<Click>,
    map: Tensor,
}

impl CorrectionState {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            clicks: Vec::new(),
            initial: Vec::new(),
            map: Tensor::full(&[height, width], UNLABELLED),
        }
    }

    /// A state whose clicks are also recorded as the reset point.
    pub fn with_initial(clicks: Vec<Click>, height: usize, width: usize) -> Result<Self> {
        let mut state = Self::new(height, width);
        for c in &clicks {
            state.push(*c)?;
        }
        state.initial = clicks;
        Ok(state)
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn initial_clicks(&self) -> &[Click] {
        &self.initial
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    /// Number of pixels carrying a correction.
    pub fn labelled_pixels(&self) -> usize {
        self.map.data().iter().filter(|&&v| v != UNLABELLED).count()
    }

    pub fn push(&mut self, click: Click) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        click.check_bounds(h, w)?;
        let mut data = self.map.data().to_vec();
        data[click.row * w + click.col] = click.label.target();
        self.map = Tensor::from_raw(vec![h, w], data);
        self.clicks.push(click);
        Ok(())
    }

    /// Reverts to the recorded initial clicks.
    pub fn reset(&mut self) {
        let (h, w) = (self.height(), self.width());
        let initial = std::mem::take(&mut self.initial);
        *self = Self::with_initial(initial, h, w).expect("initial clicks were validated");
    }
}

/// Returns a new state with `click` appended.
pub fn update_corrections(state: &CorrectionState, click: Click) -> Result<CorrectionState> {
    let mut next = state.clone();
    next.push(click)?;
    Ok(next)
}

/// Two binary channels: positive disks then negative disks.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pub channels: Tensor,
}

impl GuidanceMap {
    pub fn set_count(&self, channel: usize) -> usize {
        let plane = self.channels.shape()[1] * self.channels.shape()[2];
        self.channels.data()[channel * plane..(channel + 1) * plane]
            .iter()
            .filter(|&&v| v == 1.0)
            .count()
    }
}

pub fn encode_guidance(clicks: &[Click], height: usize, width: usize, radius: usize) -> Result<GuidanceMap> {
    let mut data = vec![0.0; 2 * height * width];
    let r = radius as isize;
    for click in clicks {
        click.check_bounds(height, width)?;
        let channel = match click.label {
            Label::Positive => 0,
            Label::Negative => 1,
        };
        let plane = &mut data[channel * height * width..(channel + 1) * height * width];
        for dr in -r..=r {
            let row = click.row as isize + dr;
            if row < 0 || row >= height as isize {
                continue;
            }
            for dc in -r..=r {
                let col = click.col as isize + dc;
                if col < 0 || col >= width as isize || dr * dr + dc * dc > r * r {
                    continue;
                }
                plane[row as usize * width + col as usize] = 1.0;
            }
        }
    }
    Ok(GuidanceMap {
        channels: Tensor::from_raw(vec![2, height, width], data),
    })
}

/// Stacks `[R, G, B, positive, negative]`.
pub fn assemble_input(image: &Tensor, guidance: &GuidanceMap) -> Result<Tensor> {
    let g = &guidance.channels;
    if image.rank() != 3 || image.shape()[0] != 3 || image.shape()[1..] != g.shape()[1..] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "assemble_input",
            expected: vec![3, g.shape()[1], g.shape()[2]],
            found: image.shape().to_vec(),
        }
        .into());
    }
    Ok(crate::ops::concat_channels(image, g)?)
}
