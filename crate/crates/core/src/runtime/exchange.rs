use ndarray::{s, Array1, Array2};

use super::rank::{GhostCache, RankState, Role};
use super::{GaugeProtocol, RuntimeError};
use crate::decomposition::{InterfaceKind, RankDatasets};

/// What one rank must evaluate for a neighbor: that neighbor's ghost points on one set.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostRequest {
    pub dest: usize,
    /// Index into the destination's ghost sets.
    pub dest_set: usize,
    pub kind: InterfaceKind,
    pub points: Array2<f64>,
}

/// Values of the source expert at the destination's ghost points.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostMessage {
    pub source: usize,
    pub dest: usize,
    pub dest_set: usize,
    pub kind: InterfaceKind,
    pub epoch: usize,
    pub points: Array2<f64>,
    pub velocity: Array2<f64>,
    pub pressure: Array1<f64>,
    pub normalized: bool,
}

/// Requests grouped by source rank.
pub fn outgoing_requests(datasets: &[RankDatasets]) -> Vec<Vec<GhostRequest>> {
    let mut out = vec![Vec::new(); datasets.len()];
    for (dest, data) in datasets.iter().enumerate() {
        for (set_index, set) in data.ghosts.iter().enumerate() {
            out[set.neighbor].push(GhostRequest {
                dest,
                dest_set: set_index,
                kind: set.kind,
                points: set.points.clone(),
            });
        }
    }
    out
}

/// `p_i − p_anchor(t_i)`. `anchor` lists `(t, p(x_anc, t))` pairs; steady data uses `t = 0`.
pub fn anchor_normalize(
    p_values: &[f64],
    times: &[f64],
    anchor: &[(f64, f64)],
) -> Result<Vec<f64>, RuntimeError> {
    p_values
        .iter()
        .zip(times)
        .map(|(&p, &t)| {
            anchor
                .iter()
                .find(|(ta, _)| ta.to_bits() == t.to_bits())
                .map(|&(_, pa)| p - pa)
                .ok_or(RuntimeError::MissingAnchor(t))
        })
        .collect()
}

/// Messages a rank sends at an exchange epoch.
pub fn make_messages(
    state: &RankState,
    requests: &[GhostRequest],
    epoch: usize,
    anchor: &[f64],
    gauge: GaugeProtocol,
) -> Result<Vec<GhostMessage>, RuntimeError> {
    let sd = state.regime.spatial_dim();
    let steady = state.regime.is_steady();
    let normalize = state.role == Role::Master && gauge == GaugeProtocol::Anchored;
    if anchor.len() != sd {
        return Err(RuntimeError::Config(format!("anchor has {} coordinates, expected {sd}", anchor.len())));
    }
    requests
        .iter()
        .map(|req| {
            let out = state.params.outputs(req.points.view())?;
            let velocity = out.slice(s![.., ..sd]).to_owned();
            let raw = out.column(sd).to_owned();
            let pressure = if normalize {
                let times: Vec<f64> = if steady {
                    vec![0.0; req.points.nrows()]
                } else {
                    req.points.column(0).to_vec()
                };
                let mut distinct: Vec<f64> = Vec::new();
                for &t in &times {
                    if !distinct.iter().any(|d| d.to_bits() == t.to_bits()) {
                        distinct.push(t);
                    }
                }
                let d = state.regime.input_dim();
                let mut anchor_pts = Array2::zeros((distinct.len(), d));
                for (i, &t) in distinct.iter().enumerate() {
                    let mut col = 0;
                    if !steady {
                        anchor_pts[[i, 0]] = t;
                        col = 1;
                    }
                    for (a, &x) in anchor.iter().enumerate() {
                        anchor_pts[[i, col + a]] = x;
                    }
                }
                let anchor_p = state.params.outputs(anchor_pts.view())?;
                let table: Vec<(f64, f64)> = distinct
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (t, anchor_p[[i, sd]]))
                    .collect();
                Array1::from(anchor_normalize(raw.as_slice().expect("contiguous"), &times, &table)?)
            } else {
                raw
            };
            Ok(GhostMessage {
                source: state.index,
                dest: req.dest,
                dest_set: req.dest_set,
                kind: req.kind,
                epoch,
                points: req.points.clone(),
                velocity,
                pressure,
                normalized: normalize,
            })
        })
        .collect()
}

/// Replaces the destination cache entry with the message contents.
pub fn apply_message(state: &mut RankState, msg: &GhostMessage) -> Result<(), RuntimeError> {
    let set = state
        .data
        .ghosts
        .get(msg.dest_set)
        .filter(|s| msg.dest == state.index && s.neighbor == msg.source)
        .ok_or_else(|| {
            RuntimeError::Config(format!(
                "message from rank {} does not match a ghost set of rank {}",
                msg.source, state.index
            ))
        })?;
    if msg.velocity.nrows() != set.points.nrows() || msg.pressure.len() != set.points.nrows() {
        return Err(RuntimeError::Config(format!(
            "message from rank {} carries {} values for {} ghost points",
            msg.source,
            msg.velocity.nrows(),
            set.points.nrows()
        )));
    }
    state.cache[msg.dest_set] = GhostCache {
        velocity: msg.velocity.clone(),
        pressure: msg.pressure.clone(),
        normalized: msg.normalized,
        epoch: Some(msg.epoch),
    };
    Ok(())
}

/// In-process exchange: every rank evaluates its neighbors' ghost points with its current
/// parameters, then all caches are replaced together. Returns the messages.
pub fn exchange_ghosts(
    ranks: &mut [RankState],
    requests: &[Vec<GhostRequest>],
    epoch: usize,
    anchor: &[f64],
    gauge: GaugeProtocol,
) -> Result<Vec<GhostMessage>, RuntimeError> {
    let mut messages = Vec::new();
    for (state, reqs) in ranks.iter().zip(requests) {
        messages.extend(make_messages(state, reqs, epoch, anchor, gauge)?);
    }
    for msg in &messages {
        apply_message(&mut ranks[msg.dest], msg)?;
    }
    Ok(messages)
}
