use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DataError, DataResult, Dataset, CHANNEL_NAMES, N_CHANNELS, PREV_FIRE_MASK};

/// Lower bound on the divisor in normalization.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel training-split mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(train: &Dataset) -> DataResult<Self> {
        let c = train.n_channels();
        let hw = train.hw();
        let count = (train.len() * hw) as f64;
        if count == 0.0 {
            return Err(DataError::Invalid("cannot compute statistics of an empty split".into()));
        }
        let mut mean = vec![0.0; c];
        for s in &train.samples {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += s.channel(ch, hw).iter().map(|&v| f64::from(v)).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for s in &train.samples {
            for (ch, v) in var.iter_mut().enumerate() {
                let m = mean[ch];
                *v += s
                    .channel(ch, hw)
                    .iter()
                    .map(|&x| (f64::from(x) - m).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Whether channel `c` keeps its raw values.
    pub fn is_exempt(c: usize) -> bool {
        c == PREV_FIRE_MASK
    }

    pub fn normalize_value(&self, c: usize, v: f64) -> f64 {
        if Self::is_exempt(c) {
            v
        } else {
            (v - self.mean[c]) / self.std[c].max(STD_FLOOR)
        }
    }

    /// Value a channel takes after normalization when replaced by its
    /// training mean: 0 for z-scored channels, the raw mean otherwise.
    pub fn normalized_mean(&self, c: usize) -> f64 {
        self.normalize_value(c, self.mean[c])
    }

    /// `(x - mean) / max(std, 1e-6)` per channel, in place.
    pub fn normalize(&self, ds: &mut Dataset) -> DataResult<()> {
        if self.mean.len() != ds.n_channels() {
            return Err(DataError::Invalid(format!(
                "statistics cover {} channels, dataset has {}",
                self.mean.len(),
                ds.n_channels()
            )));
        }
        let hw = ds.hw();
        for s in &mut ds.samples {
            for c in 0..self.mean.len() {
                if Self::is_exempt(c) {
                    continue;
                }
                for v in s.channel_mut(c, hw) {
                    *v = self.normalize_value(c, f64::from(*v)) as f32;
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("channel,mean,std\n");
        for (i, (m, d)) in self.mean.iter().zip(&self.std).enumerate() {
            let name = CHANNEL_NAMES.get(i).copied().unwrap_or("?");
            let _ = writeln!(s, "{name},{m},{d}");
        }
        s
    }

    pub fn from_text(text: &str) -> DataResult<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |line: usize, detail: String| DataError::Format { offset: line, detail };
        match lines.next() {
            Some(h) if h.trim() == "channel,mean,std" => {}
            _ => return Err(bad(0, "missing channel,mean,std header".into())),
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(bad(i + 1, format!("expected 3 fields in {line:?}")));
            }
            if CHANNEL_NAMES.get(i) != Some(&parts[0]) {
                return Err(bad(i + 1, format!("unexpected channel {:?}", parts[0])));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, format!("{s:?}: {e}")));
            let (m, d) = (num(parts[1])?, num(parts[2])?);
            if !(d >= 0.0) || !m.is_finite() || !d.is_finite() {
                return Err(bad(i + 1, format!("invalid statistics in {line:?}")));
            }
            mean.push(m);
            std.push(d);
        }
        if mean.len() != N_CHANNELS {
            return Err(bad(0, format!("expected {N_CHANNELS} channels, got {}", mean.len())));
        }
        Ok(Self { mean, std })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> DataResult<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> DataResult<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
