use serde::{Deserialize, Serialize};

/// Piecewise-linear map from SNR (dB) to packet-loss probability.
///
/// Points are sorted by SNR; values are clamped to the end points outside the
/// table. Must be non-increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<(f64, f64)>,
}

impl Default for LossCurve {
    fn default() -> Self {
        LossCurve {
            points: vec![(-5.0, 1.0), (15.0, 0.0)],
        }
    }
}

impl LossCurve {
    pub fn is_valid(&self) -> bool {
        !self.points.is_empty()
            && self.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 >= w[1].1)
            && self.points.iter().all(|&(_, p)| (0.0..=1.0).contains(&p))
    }

    pub fn loss(&self, snr_db: f64) -> f64 {
        let pts = &self.points;
        if snr_db <= pts[0].0 {
            return pts[0].1;
        }
        let last = pts[pts.len() - 1];
        if snr_db >= last.0 {
            return last.1;
        }
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if snr_db <= x1 {
                return y0 + (y1 - y0) * (snr_db - x0) / (x1 - x0);
            }
        }
        last.1
    }

    /// SNR producing `loss` on a strictly decreasing segment, if any.
    pub fn invert(&self, loss: f64) -> Option<f64> {
        for w in self.points.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if y0 > y1 && loss <= y0 && loss >= y1 {
                return Some(x0 + (loss - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        None
    }
}

/// Log-distance propagation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    pub pathloss_exponent: f64,
    /// Loss at the 1 m reference distance.
    pub reference_loss_db: f64,
    pub noise_floor_dbm: f64,
    /// Transmit power per power level, dBm.
    pub tx_power_table: Vec<f64>,
    pub snr_loss_curve: LossCurve,
    /// Extra SNR penalty for a jammed receiver. Zero keeps jamming purely in the
    /// loss-composition term.
    pub jam_snr_penalty_db: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            pathloss_exponent: 3.0,
            reference_loss_db: 40.0,
            noise_floor_dbm: -110.0,
            tx_power_table: vec![20.0, 27.0, 33.0],
            snr_loss_curve: LossCurve::default(),
            jam_snr_penalty_db: 0.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(1.5..=5.0).contains(&self.pathloss_exponent) {
            return Err(format!(
                "pathloss_exponent {} outside [1.5, 5]",
                self.pathloss_exponent
            ));
        }
        if self.tx_power_table.is_empty() {
            return Err("empty tx_power_table".into());
        }
        if !self.snr_loss_curve.is_valid() {
            return Err("snr_loss_curve must be sorted, non-increasing, within [0,1]".into());
        }
        Ok(())
    }

    /// Path loss in dB at `distance_m`; distances under 1 m are clamped to 1 m.
    pub fn path_loss_db(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(1.0);
        self.reference_loss_db + 10.0 * self.pathloss_exponent * d.log10()
    }

    pub fn snr_db(&self, tx_power_dbm: f64, distance_m: f64) -> f64 {
        tx_power_dbm - self.path_loss_db(distance_m) - self.noise_floor_dbm
    }

    pub fn tx_power(&self, level: usize) -> f64 {
        self.tx_power_table[level.min(self.tx_power_table.len() - 1)]
    }
}

/// `clamp(curve(snr) + jam + bias, 0, 1)`
pub fn compose_loss(curve: &LossCurve, snr_db: f64, jam_multiplier: f64, bias: f64) -> f64 {
    (curve.loss(snr_db) + jam_multiplier + bias).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_curve_shape() {
        let c = LossCurve::default();
        assert_eq!(c.loss(20.0), 0.0);
        assert_eq!(c.loss(15.0), 0.0);
        assert_eq!(c.loss(-5.0), 1.0);
        assert_eq!(c.loss(-30.0), 1.0);
        assert!((c.loss(5.0) - 0.5).abs() < 1e-12);
        assert!((c.invert(0.25).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn composition_clips() {
        let c = LossCurve::default();
        assert_eq!(compose_loss(&c, 5.0, 0.8, 0.0), 1.0);
        assert!((compose_loss(&c, 10.0, 0.5, 0.0) - 0.75).abs() < 1e-12);
        assert_eq!(compose_loss(&c, 20.0, 0.0, -0.3), 0.0);
    }

    #[test]
    fn exponent_bounds_validated() {
        let mut p = ChannelParams::default();
        assert!(p.validate().is_ok());
        p.pathloss_exponent = 6.0;
        assert!(p.validate().is_err());
    }
}
