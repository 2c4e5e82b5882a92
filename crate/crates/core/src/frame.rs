//! Frame representation and the label vocabulary shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest representable pixel value.
pub const MAX_PIXEL: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameKind {
    BMode,
    Doppler,
    SplitView,
    MMode,
}

impl FrameKind {
    pub const CONTAMINANTS: [FrameKind; 3] = [FrameKind::Doppler, FrameKind::SplitView, FrameKind::MMode];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "FourCH")]
    FourCh,
    #[serde(rename = "LVOT")]
    Lvot,
    #[serde(rename = "RVOT")]
    Rvot,
    Background,
}

impl View {
    pub const CARDIAC: [View; 3] = [View::FourCh, View::Lvot, View::Rvot];
    pub const ALL: [View; 4] = [View::FourCh, View::Lvot, View::Rvot, View::Background];

    /// Class index in the view heads: 4CH, LVOT, RVOT, then Background.
    pub fn index(self) -> usize {
        match self {
            View::FourCh => 0,
            View::Lvot => 1,
            View::Rvot => 2,
            View::Background => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<View> {
        View::ALL.get(i).copied()
    }

    pub fn is_cardiac(self) -> bool {
        self != View::Background
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pathology {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "HLHS")]
    Hlhs,
}

impl Pathology {
    /// Class index in the CHD head: NC = 0, HLHS = 1.
    pub fn index(self) -> usize {
        match self {
            Pathology::Nc => 0,
            Pathology::Hlhs => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Pathology> {
        match i {
            0 => Some(Pathology::Nc),
            1 => Some(Pathology::Hlhs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quality {
    Low,
    Medium,
    High,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Low, Quality::Medium, Quality::High];

    /// Additive speckle noise standard deviation and box-blur radius.
    pub fn degradation(self) -> (f64, usize) {
        match self {
            Quality::High => (5.0, 0),
            Quality::Medium => (15.0, 1),
            Quality::Low => (40.0, 2),
        }
    }
}

/// One image plus its provenance labels. Pixels are row-major and, for
/// three-channel frames, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub kind: FrameKind,
    pub view: View,
    pub pathology: Pathology,
    pub quality: Quality,
    pub patient_id: u32,
    pub frame_id: u32,
}

impl Frame {
    /// Checks the pixel range, channel count and kind/view consistency.
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("frame has {} channels", self.channels)));
        }
        if self.pixels.len() != self.height * self.width * self.channels {
            return Err(Error::Shape(format!(
                "frame {}x{}x{} holds {} pixels",
                self.height,
                self.width,
                self.channels,
                self.pixels.len()
            )));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=MAX_PIXEL).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel value {p} outside [0, 300]")));
        }
        if self.kind != FrameKind::BMode && self.view != View::Background {
            return Err(Error::InvalidArgument(format!(
                "{:?} frame labelled with cardiac view {:?}",
                self.kind, self.view
            )));
        }
        Ok(())
    }

    /// Channel-averaged intensities, one value per pixel.
    pub fn gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Single-channel copy produced by channel averaging.
    pub fn to_grayscale(&self) -> Frame {
        Frame {
            channels: 1,
            pixels: self.gray(),
            ..self.clone()
        }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}
