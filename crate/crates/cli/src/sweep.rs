use std::str::FromStr;

use cyin_core::Protocol;

/// `random:<from>..<to>:<step>`, inclusive of both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

impl Sweep {
    pub fn rates(&self) -> Vec<f64> {
        let n = ((self.to - self.from) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| round10(self.from + i as f64 * self.step)).collect()
    }

    pub fn protocols(&self) -> Vec<Protocol> {
        self.rates().into_iter().map(Protocol::Random).collect()
    }
}

fn round10(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("bad sweep {s:?}; expected random:<from>..<to>:<step>");
        let rest = s.trim().strip_prefix("random:").ok_or_else(bad)?;
        let (range, step) = rest.rsplit_once(':').ok_or_else(bad)?;
        let (from, to) = range.split_once("..").ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let sweep = Sweep { from: num(from)?, to: num(to)?, step: num(step)? };
        if !(sweep.step > 0.0) || sweep.from < 0.0 || sweep.to > 1.0 || sweep.to < sweep.from {
            return Err(format!("sweep {s:?} needs 0 <= from <= to <= 1 and step > 0"));
        }
        Ok(sweep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tenth_step_sweep_has_seven_rates() {
        let s: Sweep = "random:0.1..0.7:0.1".parse().unwrap();
        assert_eq!(s.rates(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        assert_eq!(s.protocols()[2].to_string(), "random:0.3");
    }

    #[test]
    fn single_point_and_errors() {
        let s: Sweep = "random:0.5..0.5:0.1".parse().unwrap();
        assert_eq!(s.rates(), vec![0.5]);
        assert!("fixed:0..1:0.1".parse::<Sweep>().is_err());
        assert!("random:0.1..0.7".parse::<Sweep>().is_err());
        assert!("random:0.1..0.7:0".parse::<Sweep>().is_err());
        assert!("random:0.7..0.1:0.1".parse::<Sweep>().is_err());
    }
}
