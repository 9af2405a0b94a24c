use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{Record, Trace, NUMERIC_COLUMNS};
use crate::error::{Error, Result};
use crate::nn::RngStream;
use crate::topology::{FatTreeTopology, Link};

/// Traffic profile for synthetic traces. Packet counts are per collection
/// interval for a link of capacity `capacity_kbps`; links of other
/// capacities carry proportionally scaled traffic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthProfile {
    pub base: f64,
    pub season_amp1: f64,
    pub season_period1: f64,
    pub season_amp2: f64,
    pub season_period2: f64,
    pub ar_phi: f64,
    pub noise_std: f64,
    /// Expected burst arrivals per step (Poisson).
    pub burst_rate: f64,
    pub burst_amp: f64,
    /// Per-step geometric decay of a burst.
    pub burst_decay: f64,
    pub capacity_kbps: f64,
    pub avg_packet_size: f64,
    pub interval_s: f64,
    /// Per-link load multipliers are drawn uniformly from this range.
    pub link_scale_min: f64,
    pub link_scale_max: f64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            base: 5000.0,
            season_amp1: 1500.0,
            season_period1: 24.0,
            season_amp2: 2000.0,
            season_period2: 144.0,
            ar_phi: 0.8,
            noise_std: 250.0,
            burst_rate: 0.02,
            burst_amp: 3000.0,
            burst_decay: 0.5,
            capacity_kbps: 10_000.0,
            avg_packet_size: 1000.0,
            interval_s: 10.0,
            link_scale_min: 0.3,
            link_scale_max: 1.6,
        }
    }
}

impl SynthProfile {
    /// Same profile with every traffic source silenced except the base level.
    pub fn constant(&self) -> Self {
        Self {
            season_amp1: 0.0,
            season_amp2: 0.0,
            noise_std: 0.0,
            burst_rate: 0.0,
            burst_amp: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("season_period1", self.season_period1),
            ("season_period2", self.season_period2),
            ("capacity_kbps", self.capacity_kbps),
            ("avg_packet_size", self.avg_packet_size),
            ("interval_s", self.interval_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("synth profile `{name}` must be positive")));
            }
        }
        if !(self.ar_phi.abs() < 1.0) {
            return Err(Error::Config("synth profile `ar_phi` must be in (-1, 1)".into()));
        }
        if self.link_scale_min > self.link_scale_max || self.link_scale_min < 0.0 {
            return Err(Error::Config("synth profile link scale range is invalid".into()));
        }
        Ok(())
    }

    fn kbps(&self, packets: f64, packet_size: f64) -> f64 {
        packets * packet_size * 8.0 / self.interval_s / 1000.0
    }
}

pub fn link_label(index: usize) -> String {
    format!("link{index:02}")
}

/// Generates `n_steps` records per link starting at time index 0.
pub fn synth_trace(topology: &FatTreeTopology, n_steps: usize, profile: &SynthProfile, seed: u64) -> Result<Trace> {
    synth_trace_window(topology, 0, n_steps, profile, seed)
}

/// Steps `start..start + n_steps` of the same realization [`synth_trace`] produces.
pub fn synth_trace_window(
    topology: &FatTreeTopology,
    start: usize,
    n_steps: usize,
    profile: &SynthProfile,
    seed: u64,
) -> Result<Trace> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    profile.validate()?;
    let root = RngStream::new(seed).derive("synth");
    let mut records = Vec::with_capacity(topology.num_links() * n_steps);
    for link in topology.links() {
        synth_link(link, start, n_steps, profile, &root.derive(&link_label(link.index)), &mut records);
    }
    Trace::new(NUMERIC_COLUMNS.iter().map(|c| c.to_string()).collect(), records)
}

fn synth_link(link: &Link, start: usize, n_steps: usize, p: &SynthProfile, rng: &RngStream, out: &mut Vec<Record>) {
    let mut shape = rng.derive("shape");
    let scale = shape.uniform_range(p.link_scale_min, p.link_scale_max) * link.capacity / p.capacity_kbps;
    let tx_size = p.avg_packet_size * shape.uniform_range(0.9, 1.1);
    let mut noise_rng = rng.derive("noise");
    let mut burst_rng = rng.derive("burst");
    let mut size_rng = rng.derive("size");

    let mut ar = 0.0;
    let mut burst = 0.0;
    for t in 0..start + n_steps {
        ar = p.ar_phi * ar + p.noise_std * noise_rng.normal();
        burst = p.burst_decay * burst + p.burst_amp * burst_rng.poisson(p.burst_rate) as f64;
        let size_jitter = size_rng.uniform_range(-0.05, 0.05);
        if t < start {
            continue;
        }
        let tf = t as f64;
        let level = p.base
            + p.season_amp1 * (TAU * tf / p.season_period1).sin()
            + p.season_amp2 * (TAU * tf / p.season_period2).sin();
        let packets = (scale * (level + ar + burst)).max(0.0).round();

        let rx_size = tx_size * (1.0 + size_jitter);
        let tx_bytes = packets * tx_size;
        let tx_bitrate = p.kbps(packets, tx_size);
        let util = (tx_bitrate / link.capacity).clamp(0.0, 1.5);
        let lost = if util > 1.0 {
            (packets * (util - 1.0) / util).round()
        } else {
            0.0
        };
        let rx_packets = packets - lost;
        let rx_bytes = rx_packets * rx_size;
        let rx_bitrate = p.kbps(rx_packets, rx_size);
        let rx_util = (rx_bitrate / link.capacity).clamp(0.0, 1.5);
        let flows = (packets / 500.0).round().max(1.0);
        let latency = link.base_latency / (1.0 - util.min(0.99));

        let values = [
            packets,
            tx_bytes,
            packets,
            rx_packets,
            tx_bytes,
            rx_bytes,
            tx_bitrate,
            rx_bitrate,
            link.capacity,
            lost,
            rx_util,
            util,
            tx_size,
            rx_size,
            tx_bitrate / flows,
            if tx_bitrate > 0.0 { rx_bitrate / tx_bitrate } else { 1.0 },
            latency,
            flows,
            (tf + 1.0) * p.interval_s,
        ];
        debug_assert_eq!(values.len(), NUMERIC_COLUMNS.len());
        out.push(Record {
            time_index: t as i64,
            link_id: link_label(link.index),
            eth_dst: format!("00:00:00:00:{:02x}:{:02x}", link.dst.tier as u8, link.dst.index),
            switch_id: link.src.name(),
            in_port: (link.index % 4 + 1).to_string(),
            out_port: (link.dst.index % 8 + 1).to_string(),
            values: values.into_iter().map(Some).collect(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TARGET;
    use crate::topology::{build_fat_tree, FatTreeConfig};

    fn topo() -> FatTreeTopology {
        build_fat_tree(&FatTreeConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let p = SynthProfile::default();
        let a = synth_trace(&topo(), 50, &p, 9).unwrap();
        let b = synth_trace(&topo(), 50, &p, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_trace(&topo(), 50, &p, 10).unwrap());
        assert_eq!(a.len(), 40 * 50);
    }

    #[test]
    fn window_matches_full_realization() {
        let p = SynthProfile::default();
        let full = synth_trace(&topo(), 30, &p, 4).unwrap();
        let tail = synth_trace_window(&topo(), 20, 10, &p, 4).unwrap();
        assert_eq!(full.filter(|r| r.time_index >= 20), tail);
    }

    #[test]
    fn zero_amplitude_profile_is_constant() {
        let p = SynthProfile::default().constant();
        let t = synth_trace(&topo(), 40, &p, 1).unwrap();
        for link in t.link_ids() {
            let s = t.series(&link, TARGET).unwrap();
            assert!(s.iter().all(|v| *v == s[0]), "{link}");
        }
    }

    #[test]
    fn loss_only_when_overutilized() {
        let p = SynthProfile::default();
        let t = synth_trace(&topo(), 300, &p, 2).unwrap();
        let util = t.column_index("Tx_bandwidth_utilization").unwrap();
        let loss = t.column_index("Packet_loss").unwrap();
        let mut saw_loss = false;
        for r in t.records() {
            let (u, l) = (r.values[util].unwrap(), r.values[loss].unwrap());
            assert!((0.0..=1.5).contains(&u));
            if u <= 1.0 {
                assert_eq!(l, 0.0);
            }
            saw_loss |= l > 0.0;
        }
        assert!(saw_loss, "default profile should occasionally overload a link");

        let calm = SynthProfile {
            base: 1000.0,
            ..SynthProfile::default().constant()
        };
        let t = synth_trace(&topo(), 20, &calm, 2).unwrap();
        assert!(t.records().iter().all(|r| r.values[util].unwrap() <= 1.0 && r.values[loss] == Some(0.0)));
    }

    #[test]
    fn counts_non_negative_and_bytes_consistent() {
        let t = synth_trace(&topo(), 100, &SynthProfile::default(), 3).unwrap();
        let pk = t.column_index(TARGET).unwrap();
        let by = t.column_index("Byte_count").unwrap();
        let sz = t.column_index("Tx_avg_packet_size").unwrap();
        for r in t.records() {
            let p = r.values[pk].unwrap();
            assert!(p >= 0.0);
            assert!((r.values[by].unwrap() - p * r.values[sz].unwrap()).abs() < 1e-6);
        }
    }
}
