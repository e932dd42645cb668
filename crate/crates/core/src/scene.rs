//! Decoding of a flat observation back into ego-centred quantities: lanes,
//! gaps, closing speeds and time-to-collision.

use crate::sim::{EgoObservation, IdmParams, SimConfig, FEATURES_PER_VEHICLE, OBSERVED_VEHICLES, POSITION_SCALE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Longitudinal offset of the centre from the ego's, meters.
    pub dx: f64,
    pub dy: f64,
    /// Relative longitudinal speed (theirs minus ego's), m/s.
    pub dvx: f64,
    pub lane: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ego_y: f64,
    pub ego_speed: f64,
    pub ego_lane: usize,
    pub lane_count: usize,
    pub vehicle_length: f64,
    pub v_max: f64,
    /// Observed vehicles in observation order (nearest first).
    pub neighbors: Vec<Neighbor>,
}

impl Scene {
    /// Zero-padded slots are treated as absent.
    pub fn from_obs(obs: &EgoObservation, cfg: &SimConfig) -> Scene {
        let ego = obs.block(0);
        let ego_y = ego[1] * POSITION_SCALE;
        let neighbors = (1..OBSERVED_VEHICLES)
            .map(|slot| obs.block(slot))
            .filter(|b| b.len() == FEATURES_PER_VEHICLE && b.iter().any(|v| *v != 0.0))
            .map(|b| {
                let dy = b[1] * POSITION_SCALE;
                Neighbor { dx: b[0] * POSITION_SCALE, dy, dvx: b[2] * cfg.v_max, lane: cfg.lane_of(ego_y + dy) }
            })
            .collect();
        Scene {
            ego_y,
            ego_speed: ego[2] * cfg.v_max,
            ego_lane: cfg.lane_of(ego_y),
            lane_count: cfg.lane_count,
            vehicle_length: cfg.vehicle_length,
            v_max: cfg.v_max,
            neighbors,
        }
    }

    pub fn left_lane(&self) -> Option<usize> {
        self.ego_lane.checked_sub(1)
    }

    pub fn right_lane(&self) -> Option<usize> {
        Some(self.ego_lane + 1).filter(|l| *l < self.lane_count)
    }

    /// Nearest vehicle in `lane` whose centre is at or ahead of the ego's.
    pub fn leader(&self, lane: usize) -> Option<&Neighbor> {
        self.neighbors.iter().filter(|n| n.lane == lane && n.dx >= 0.0).min_by(|a, b| a.dx.total_cmp(&b.dx))
    }

    /// Nearest vehicle in `lane` whose centre is behind the ego's.
    pub fn follower(&self, lane: usize) -> Option<&Neighbor> {
        self.neighbors.iter().filter(|n| n.lane == lane && n.dx < 0.0).max_by(|a, b| a.dx.total_cmp(&b.dx))
    }

    /// Bumper-to-bumper gap to the leader in `lane`; infinite when none.
    pub fn front_gap(&self, lane: usize) -> f64 {
        self.leader(lane).map_or(f64::INFINITY, |n| n.dx - self.vehicle_length)
    }

    pub fn rear_gap(&self, lane: usize) -> f64 {
        self.follower(lane).map_or(f64::INFINITY, |n| -n.dx - self.vehicle_length)
    }

    /// Rate at which the gap to the leader in `lane` shrinks (positive = closing).
    pub fn front_closing(&self, lane: usize) -> f64 {
        self.leader(lane).map_or(0.0, |n| -n.dvx)
    }

    pub fn rear_closing(&self, lane: usize) -> f64 {
        self.follower(lane).map_or(0.0, |n| n.dvx)
    }

    /// Front gap over closing speed; infinite when not closing.
    pub fn ttc_ahead(&self, lane: usize) -> f64 {
        ttc(self.front_gap(lane), self.front_closing(lane))
    }

    /// Any vehicle in `lane` overlapping the ego longitudinally.
    pub fn alongside(&self, lane: usize) -> bool {
        self.neighbors.iter().any(|n| n.lane == lane && n.dx.abs() < self.vehicle_length)
    }

    /// Lane-change safety test: nobody alongside and the new follower would
    /// not need to brake harder than `safe_decel`.
    pub fn lane_change_safe(&self, lane: usize, safe_decel: f64) -> bool {
        if self.alongside(lane) {
            return false;
        }
        match self.follower(lane) {
            None => true,
            Some(f) => {
                let gap = -f.dx - self.vehicle_length;
                let params = IdmParams { desired_speed: self.v_max, ..IdmParams::default() };
                crate::sim::idm_acceleration(gap, self.ego_speed + f.dvx, self.ego_speed, &params) >= -safe_decel
            }
        }
    }
}

pub fn ttc(gap: f64, closing: f64) -> f64 {
    if closing > 0.0 && gap.is_finite() {
        gap.max(0.0) / closing
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::sim::{VehicleState, WorldState};

    use super::*;

    pub fn vehicle(cfg: &SimConfig, x: f64, lane: usize, vx: f64) -> VehicleState {
        VehicleState { x, y: cfg.lane_center(lane), vx, vy: 0.0, lane, is_ego: false, target_lane: lane, target_speed: vx }
    }

    /// Ego at x=0 in `lane` with speed `v`, plus the given others.
    pub fn world(cfg: &SimConfig, lane: usize, v: f64, others: &[(f64, usize, f64)]) -> WorldState {
        let mut ego = vehicle(cfg, 0.0, lane, v);
        ego.is_ego = true;
        let mut vehicles = vec![ego];
        vehicles.extend(others.iter().map(|&(x, l, vx)| vehicle(cfg, x, l, vx)));
        WorldState { time: 0.0, vehicles, done: false, collided: false }
    }
}
