use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::reward::reward_formula;
use super::{EnvConfig, EnvError, EnvKind};
use crate::design::DesignGraph;

const MIN_DT: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Link {
    len: f64,
    radius: f64,
    /// Rest direction angle in the world frame.
    rest_angle: f64,
    mass: f64,
    inertia: f64,
    gear: f64,
    /// Links from the root down to and including this one.
    chain: Vec<usize>,
}

/// Outcome of one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    /// Termination condition hit (fall, physics failure).
    pub terminated: bool,
    /// Horizon reached.
    pub truncated: bool,
    /// Non-finite state; the episode is cut short.
    pub failed: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated || self.failed
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Kin {
    angle: f64,
    omega: f64,
    pivot: [f64; 2],
    distal: [f64; 2],
    com: [f64; 2],
}

/// Planar articulated body built from a [`DesignGraph`].
///
/// Generalized coordinates are `[x, z, theta, phi_1, ..]`: root pivot
/// position, root orientation, then one hinge angle per non-root joint in
/// BFS order. Velocity-dependent forces (drag, damping, contact damping,
/// friction) are integrated implicitly; gravity, torques and contact
/// springs explicitly.
#[derive(Debug, Clone)]
pub struct PlanarSim {
    cfg: EnvConfig,
    links: Vec<Link>,
    q: DVector<f64>,
    qd: DVector<f64>,
    kin: Vec<Kin>,
    t: usize,
    finished: bool,
}

fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn dof_of(link: usize) -> usize {
    if link == 0 {
        2
    } else {
        link + 2
    }
}

impl PlanarSim {
    /// Builds the body in its rest pose at the spawn height.
    ///
    /// The seed perturbs nothing today; it is accepted so that builds stay
    /// reproducible should initial-state noise be added.
    pub fn build(design: &DesignGraph, cfg: &EnvConfig, _seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        if cfg.kind == EnvKind::Reward3dTest {
            return Err(EnvError::Config("reward3d-test has no dynamics".into()));
        }
        if design.max_children() > cfg.max_children {
            return Err(EnvError::Design(format!(
                "design allows {} children per joint, env allows {}",
                design.max_children(),
                cfg.max_children
            )));
        }
        design
            .validate()
            .map_err(|e| EnvError::Design(e.to_string()))?;

        let parents = design.parent_positions();
        let mut links = Vec::with_capacity(design.len());
        for (k, attr) in design.attrs().iter().enumerate() {
            let a = attr.to_array();
            let (len, dir) = cfg.ranges.bone(a[0], a[1]);
            let radius = cfg.ranges.radius(a[2]);
            let gear = cfg.ranges.gear(a[3]);
            let volume = PI * radius * radius * len + 4.0 / 3.0 * PI * radius.powi(3);
            let mass = cfg.density * volume;
            let inertia = mass * (len * len / 12.0 + radius * radius / 4.0);
            let mut chain = match parents[k] {
                Some(p) => {
                    let c: &Link = &links[p];
                    c.chain.clone()
                }
                None => Vec::new(),
            };
            chain.push(k);
            links.push(Link {
                len,
                radius,
                rest_angle: dir[1].atan2(dir[0]),
                mass,
                inertia,
                gear,
                chain,
            });
        }
        let n = links.len();
        let mut sim = Self {
            cfg: cfg.clone(),
            links,
            q: DVector::zeros(n + 2),
            qd: DVector::zeros(n + 2),
            kin: vec![Kin::default(); n],
            t: 0,
            finished: false,
        };
        sim.q[1] = cfg.spawn_height;
        sim.update_kinematics();
        let clearance = sim.min_clearance();
        if clearance < 0.0 {
            sim.q[1] -= clearance;
            sim.update_kinematics();
        }
        Ok(sim)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn n_joints(&self) -> usize {
        self.links.len()
    }

    /// Number of actuated hinges (every non-root joint).
    pub fn action_dim(&self) -> usize {
        self.links.len() - 1
    }

    pub fn obs_dim(&self) -> usize {
        self.cfg.obs_dim()
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn radii(&self) -> Vec<f64> {
        self.links.iter().map(|l| l.radius).collect()
    }

    pub fn gears(&self) -> Vec<f64> {
        self.links.iter().map(|l| l.gear).collect()
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.links.iter().map(|l| l.len).collect()
    }

    /// Generalized positions and velocities.
    pub fn state(&self) -> (Vec<f64>, Vec<f64>) {
        (self.q.as_slice().to_vec(), self.qd.as_slice().to_vec())
    }

    /// Overwrites the generalized state (tests, diagnostics).
    pub fn set_state(&mut self, q: &[f64], qd: &[f64]) -> Result<(), EnvError> {
        let n = self.q.len();
        if q.len() != n || qd.len() != n {
            return Err(EnvError::ActionDim {
                expected: n,
                got: q.len().min(qd.len()),
            });
        }
        self.q.copy_from_slice(q);
        self.qd.copy_from_slice(qd);
        self.update_kinematics();
        Ok(())
    }

    pub fn root_height(&self) -> f64 {
        self.q[1]
    }

    pub fn root_x(&self) -> f64 {
        self.q[0]
    }

    pub fn com_x(&self) -> f64 {
        let mut mx = 0.0;
        let mut m = 0.0;
        for (l, k) in self.links.iter().zip(&self.kin) {
            mx += l.mass * k.com[0];
            m += l.mass;
        }
        mx / m
    }

    /// Lowest signed clearance of any contact disc above the terrain.
    pub fn min_clearance(&self) -> f64 {
        let mut best = f64::INFINITY;
        if self.cfg.terrain == super::Terrain::None {
            return best;
        }
        for (p, r) in self.contact_points() {
            let c = match self.cfg.terrain.contact(p[0], p[1], r) {
                Some(c) => -c.depth,
                None => p[1] - r - self.cfg.terrain.height_at(p[0]),
            };
            best = best.min(c);
        }
        best
    }

    pub fn kinetic_energy(&self) -> f64 {
        let m = self.mass_matrix();
        0.5 * self.qd.dot(&(&m * &self.qd))
    }

    /// Per-joint observation rows, `n_joints x obs_dim`, row-major.
    pub fn observation(&self) -> Vec<f64> {
        let w = self.obs_dim();
        let n = self.links.len();
        let mut obs = vec![0.0; n * w];
        obs[0] = self.q[2];
        obs[1] = self.qd[2];
        let extras: Vec<f64> = match self.cfg.kind {
            EnvKind::Swimmer | EnvKind::Reward3dTest => vec![self.qd[0], self.qd[1]],
            EnvKind::Loco2d => vec![self.q[1], self.qd[0], self.qd[1]],
            EnvKind::Gap => {
                let period = self.cfg.gap_period().unwrap_or(1.0);
                vec![
                    self.q[1],
                    self.qd[0],
                    self.qd[1],
                    self.q[0].rem_euclid(period) / period,
                ]
            }
        };
        obs[2..2 + extras.len()].copy_from_slice(&extras);
        for k in 1..n {
            obs[k * w] = self.q[k + 2];
            obs[k * w + 1] = self.qd[k + 2];
        }
        obs
    }

    /// Advances one control step with normalized actions for joints `1..n`.
    pub fn step(&mut self, actions: &[f64]) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::Finished);
        }
        if actions.len() != self.action_dim() {
            return Err(EnvError::ActionDim {
                expected: self.action_dim(),
                got: actions.len(),
            });
        }
        let n = self.links.len();
        let mut tau = DVector::zeros(n + 2);
        for (k, a) in actions.iter().enumerate() {
            let a = if a.is_finite() { a.clamp(-1.0, 1.0) } else { 0.0 };
            tau[k + 3] = self.links[k + 1].gear * a;
        }
        let x0 = self.com_x();
        let h = self.cfg.dt / self.cfg.substeps as f64;
        let mut failed = false;
        for _ in 0..self.cfg.substeps {
            if !self.substep(h, &tau) {
                failed = true;
                break;
            }
        }
        self.t += 1;
        if failed {
            self.finished = true;
            return Ok(StepResult {
                reward: 0.0,
                terminated: false,
                truncated: false,
                failed: true,
            });
        }
        let dx = self.com_x() - x0;
        let reward = reward_formula(self.cfg.kind, dx, self.cfg.dt.max(MIN_DT), actions, n);
        let terminated = self
            .cfg
            .termination_height
            .is_some_and(|h| self.root_height() < h);
        let truncated = !terminated && self.t >= self.cfg.horizon;
        self.finished = terminated || truncated;
        Ok(StepResult {
            reward,
            terminated,
            truncated,
            failed: false,
        })
    }

    fn update_kinematics(&mut self) {
        let n = self.links.len();
        for k in 0..n {
            let link = &self.links[k];
            let (pivot, base_angle, base_omega) = if k == 0 {
                ([self.q[0], self.q[1]], self.q[2], self.qd[2])
            } else {
                let p = link.chain[link.chain.len() - 2];
                let pk = &self.kin[p];
                let rel = self.q[k + 2] - self.links[p].rest_angle;
                (pk.distal, pk.angle + rel, pk.omega + self.qd[k + 2])
            };
            // angle = theta + rest_angle + sum of hinge angles along the chain
            let angle = base_angle + link.rest_angle;
            let e = [angle.cos(), angle.sin()];
            self.kin[k] = Kin {
                angle,
                omega: base_omega,
                pivot,
                distal: [pivot[0] + link.len * e[0], pivot[1] + link.len * e[1]],
                com: [pivot[0] + 0.5 * link.len * e[0], pivot[1] + 0.5 * link.len * e[1]],
            };
        }
    }

    fn contact_points(&self) -> Vec<([f64; 2], f64)> {
        let mut pts = Vec::with_capacity(self.links.len() + 1);
        pts.push((self.kin[0].pivot, self.links[0].radius));
        for (l, k) in self.links.iter().zip(&self.kin) {
            pts.push((k.distal, l.radius));
        }
        pts
    }

    /// Sparse Jacobian of a point rigidly attached to `link`.
    fn point_jacobian(&self, link: usize, p: [f64; 2], out: &mut Vec<(usize, [f64; 2])>) {
        out.clear();
        out.push((0, [1.0, 0.0]));
        out.push((1, [0.0, 1.0]));
        for &l in &self.links[link].chain {
            out.push((dof_of(l), perp(sub(p, self.kin[l].pivot))));
        }
    }

    fn mass_matrix(&self) -> DMatrix<f64> {
        let nd = self.q.len();
        let mut m = DMatrix::zeros(nd, nd);
        let mut jac = Vec::new();
        for (k, link) in self.links.iter().enumerate() {
            self.point_jacobian(k, self.kin[k].com, &mut jac);
            add_outer(&mut m, &jac, link.mass, None);
            for &a in &link.chain {
                for &b in &link.chain {
                    m[(dof_of(a), dof_of(b))] += link.inertia;
                }
            }
        }
        for d in 3..nd {
            m[(d, d)] += self.cfg.armature;
        }
        m
    }

    fn substep(&mut self, h: f64, tau: &DVector<f64>) -> bool {
        let nd = self.q.len();
        let m = self.mass_matrix();
        let mut damp = DMatrix::zeros(nd, nd);
        let mut f = tau.clone();
        let mut jac = Vec::new();
        let cfg = &self.cfg;

        for (k, link) in self.links.iter().enumerate() {
            let kin = &self.kin[k];
            self.point_jacobian(k, kin.com, &mut jac);
            // velocity-product (centripetal) acceleration of the COM
            let mut bias = [0.0, 0.0];
            for &l in &link.chain {
                let kl = &self.kin[l];
                let arm = if l == k { sub(kin.com, kl.pivot) } else { sub(kl.distal, kl.pivot) };
                let w2 = kl.omega * kl.omega;
                bias[0] -= w2 * arm[0];
                bias[1] -= w2 * arm[1];
            }
            let force = [
                -link.mass * bias[0],
                -link.mass * (bias[1] + cfg.gravity),
            ];
            for (d, col) in &jac {
                f[*d] += dot(*col, force);
            }
            if cfg.viscosity > 0.0 {
                let e = [kin.angle.cos(), kin.angle.sin()];
                let nrm = perp(e);
                let ct = cfg.viscosity * cfg.drag_tangent * link.len;
                let cn = cfg.viscosity * cfg.drag_normal * link.len;
                let kmat = [
                    [ct * e[0] * e[0] + cn * nrm[0] * nrm[0], ct * e[0] * e[1] + cn * nrm[0] * nrm[1]],
                    [ct * e[1] * e[0] + cn * nrm[1] * nrm[0], ct * e[1] * e[1] + cn * nrm[1] * nrm[1]],
                ];
                add_outer(&mut damp, &jac, 1.0, Some(kmat));
                let crot = cfg.viscosity * cfg.drag_normal * link.len.powi(3) / 12.0;
                for &a in &link.chain {
                    for &b in &link.chain {
                        damp[(dof_of(a), dof_of(b))] += crot;
                    }
                }
            }
        }
        for d in 3..nd {
            damp[(d, d)] += cfg.joint_damping;
        }

        if cfg.terrain != super::Terrain::None {
            let mut pts = Vec::with_capacity(self.links.len() + 1);
            pts.push((0usize, self.kin[0].pivot, self.links[0].radius));
            for (k, l) in self.links.iter().enumerate() {
                pts.push((k, self.kin[k].distal, l.radius));
            }
            for (k, p, r) in pts {
                let Some(c) = cfg.terrain.contact(p[0], p[1], r) else {
                    continue;
                };
                self.point_jacobian(k, p, &mut jac);
                let mut v = [0.0, 0.0];
                for (d, col) in &jac {
                    v[0] += col[0] * self.qd[*d];
                    v[1] += col[1] * self.qd[*d];
                }
                let nrm = c.normal;
                let tng = [nrm[1], -nrm[0]];
                let fn_spring = cfg.contact_stiffness * c.depth;
                let vn = dot(v, nrm);
                let fn_total = (fn_spring - cfg.contact_damping * vn).max(0.0);
                let vt = dot(v, tng).abs();
                let ct = if vt > 1e-9 {
                    cfg.friction_damping.min(cfg.friction * fn_total / vt)
                } else {
                    cfg.friction_damping
                };
                let cn = if fn_total > 0.0 { cfg.contact_damping } else { 0.0 };
                let kmat = [
                    [cn * nrm[0] * nrm[0] + ct * tng[0] * tng[0], cn * nrm[0] * nrm[1] + ct * tng[0] * tng[1]],
                    [cn * nrm[1] * nrm[0] + ct * tng[1] * tng[0], cn * nrm[1] * nrm[1] + ct * tng[1] * tng[1]],
                ];
                add_outer(&mut damp, &jac, 1.0, Some(kmat));
                let force = [fn_spring * nrm[0], fn_spring * nrm[1]];
                for (d, col) in &jac {
                    f[*d] += dot(*col, force);
                }
            }
        }

        let a = &m + &damp * h;
        let rhs = &m * &self.qd + &f * h;
        let Some(chol) = a.clone().cholesky() else {
            return false;
        };
        let mut qd = chol.solve(&rhs);

        // joint limits: inelastic impulses that stop motion past the limit
        let lim = cfg.joint_limit;
        for _ in 0..2 {
            for d in 3..nd {
                let next = self.q[d] + h * qd[d];
                let target = if next > lim && qd[d] > 0.0 {
                    ((lim - self.q[d]) / h).max(0.0)
                } else if next < -lim && qd[d] < 0.0 {
                    ((-lim - self.q[d]) / h).min(0.0)
                } else {
                    continue;
                };
                let mut e = DVector::zeros(nd);
                e[d] = 1.0;
                let col = chol.solve(&e);
                let lambda = (target - qd[d]) / col[d];
                qd.axpy(lambda, &col, 1.0);
            }
        }

        self.q.axpy(h, &qd, 1.0);
        self.qd = qd;
        if self.q.iter().chain(self.qd.iter()).any(|v| !v.is_finite()) {
            return false;
        }
        self.update_kinematics();
        true
    }
}

/// `m += scale * J^T K J` for a sparse 2-row Jacobian (`K = I` if absent).
fn add_outer(m: &mut DMatrix<f64>, jac: &[(usize, [f64; 2])], scale: f64, k: Option<[[f64; 2]; 2]>) {
    for (da, ca) in jac {
        let kc = match k {
            Some(k) => [k[0][0] * ca[0] + k[0][1] * ca[1], k[1][0] * ca[0] + k[1][1] * ca[1]],
            None => *ca,
        };
        for (db, cb) in jac {
            m[(*db, *da)] += scale * dot(*cb, kc);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{AttrVector, DEFAULT_MAX_JOINTS as MJ};

    fn chain3() -> DesignGraph {
        DesignGraph::chain(&[AttrVector::new(0.5, 0.0, 0.0, 0.0); 3], 3, MJ)
    }

    fn walker() -> DesignGraph {
        DesignGraph::chain(
            &[
                AttrVector::new(0.6, 0.0, 0.0, 0.0),
                AttrVector::new(0.0, -0.6, 0.0, 0.0),
                AttrVector::new(0.0, -0.6, 0.0, 0.0),
            ],
            3,
            MJ,
        )
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = EnvConfig::for_kind(EnvKind::Loco2d);
        let a = PlanarSim::build(&walker(), &cfg, 7).unwrap();
        let b = PlanarSim::build(&walker(), &cfg, 7).unwrap();
        assert_eq!(a.state(), b.state());
        assert_eq!(a.observation(), b.observation());
    }

    #[test]
    fn trajectories_are_bitwise_reproducible() {
        let cfg = EnvConfig::for_kind(EnvKind::Swimmer);
        let run = || {
            let mut s = PlanarSim::build(&chain3(), &cfg, 1).unwrap();
            let mut out = Vec::new();
            for t in 0..50 {
                let a = [(t as f64 * 0.3).sin(), (t as f64 * 0.3).cos()];
                out.push(s.step(&a).unwrap().reward);
            }
            (out, s.state())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_joint_has_no_hinges() {
        let d = DesignGraph::new_root(AttrVector::default(), 3, MJ);
        let cfg = EnvConfig::for_kind(EnvKind::Swimmer);
        let mut s = PlanarSim::build(&d, &cfg, 0).unwrap();
        assert_eq!(s.action_dim(), 0);
        assert_eq!(s.n_joints(), 1);
        assert_eq!(s.observation().len(), cfg.obs_dim());
        assert!(s.step(&[]).is_ok());
        assert!(matches!(s.step(&[0.0]), Err(EnvError::ActionDim { .. })));
    }

    #[test]
    fn rejects_wider_branching() {
        let d = DesignGraph::new_root(AttrVector::default(), 4, MJ);
        let cfg = EnvConfig::for_kind(EnvKind::Loco2d);
        assert!(matches!(PlanarSim::build(&d, &cfg, 0), Err(EnvError::Design(_))));
    }

    #[test]
    fn radius_follows_size_attr() {
        let cfg = EnvConfig::for_kind(EnvKind::Swimmer);
        let d = DesignGraph::chain(
            &[AttrVector::new(0.5, 0.0, -1.0, 0.0), AttrVector::new(0.5, 0.0, 1.0, 0.0)],
            3,
            MJ,
        );
        let s = PlanarSim::build(&d, &cfg, 0).unwrap();
        assert_eq!(s.radii(), vec![0.02, 0.12]);
    }

    #[test]
    fn loco_terminates_below_height() {
        let cfg = EnvConfig::for_kind(EnvKind::Loco2d);
        let mut s = PlanarSim::build(&walker(), &cfg, 0).unwrap();
        let (mut q, qd) = s.state();
        q[1] = 0.69;
        s.set_state(&q, &qd).unwrap();
        let r = s.step(&[0.0, 0.0]).unwrap();
        assert!(r.terminated);
        assert!(matches!(s.step(&[0.0, 0.0]), Err(EnvError::Finished)));
    }

    #[test]
    fn gap_terminates_below_one() {
        let cfg = EnvConfig::for_kind(EnvKind::Gap);
        let mut s = PlanarSim::build(&walker(), &cfg, 0).unwrap();
        let (mut q, qd) = s.state();
        q[1] = 0.99;
        s.set_state(&q, &qd).unwrap();
        assert!(s.step(&[0.0, 0.0]).unwrap().terminated);

        let mut s = PlanarSim::build(&walker(), &cfg, 0).unwrap();
        assert!(!s.step(&[0.0, 0.0]).unwrap().terminated);
    }

    #[test]
    fn horizon_truncates() {
        let mut cfg = EnvConfig::for_kind(EnvKind::Swimmer);
        cfg.horizon = 3;
        let mut s = PlanarSim::build(&chain3(), &cfg, 0).unwrap();
        assert!(!s.step(&[0.0, 0.0]).unwrap().done());
        assert!(!s.step(&[0.0, 0.0]).unwrap().done());
        let r = s.step(&[0.0, 0.0]).unwrap();
        assert!(r.truncated && !r.terminated);
    }

    #[test]
    fn passive_swimmer_dissipates() {
        let cfg = EnvConfig::for_kind(EnvKind::Swimmer);
        let mut s = PlanarSim::build(&chain3(), &cfg, 0).unwrap();
        let (q, _) = s.state();
        s.set_state(&q, &[0.8, -0.3, 1.5, -2.0, 3.0]).unwrap();
        let mut ke = s.kinetic_energy();
        for _ in 0..100 {
            s.step(&[0.0, 0.0]).unwrap();
            let next = s.kinetic_energy();
            assert!(next <= ke, "{next} > {ke}");
            ke = next;
        }
    }

    #[test]
    fn resting_body_barely_penetrates() {
        let cfg = EnvConfig::for_kind(EnvKind::Loco2d);
        let d = DesignGraph::new_root(AttrVector::new(1.0, 0.0, 0.0, 0.0), 3, MJ);
        let mut s = PlanarSim::build(&d, &cfg, 0).unwrap();
        let (mut q, qd) = s.state();
        q[1] = 0.08;
        s.set_state(&q, &qd).unwrap();
        let mut cfg_long = cfg.clone();
        cfg_long.termination_height = None;
        let mut s = PlanarSim::build(&d, &cfg_long, 0).unwrap();
        s.set_state(&q, &qd).unwrap();
        for _ in 0..400 {
            s.step(&[]).unwrap();
        }
        let pen = -s.min_clearance();
        assert!(pen < 0.02, "penetration {pen}");
        assert!(s.kinetic_energy() < 1e-3);
    }

    #[test]
    fn gap_phase_is_periodic() {
        let cfg = EnvConfig::for_kind(EnvKind::Gap);
        let mut s = PlanarSim::build(&walker(), &cfg, 0).unwrap();
        let (mut q, qd) = s.state();
        q[0] = 0.7;
        s.set_state(&q, &qd).unwrap();
        let a = s.observation()[5];
        q[0] = 0.7 + 3.2 * 3.0;
        s.set_state(&q, &qd).unwrap();
        let b = s.observation()[5];
        assert!((a - b).abs() < 1e-12);
        assert!((a - 0.7 / 3.2).abs() < 1e-12);
    }

    #[test]
    fn undulating_swimmer_moves() {
        let cfg = EnvConfig::for_kind(EnvKind::Swimmer);
        let mut s = PlanarSim::build(&chain3(), &cfg, 0).unwrap();
        let x0 = s.com_x();
        for t in 0..200 {
            let ph = t as f64 * 0.04 * 2.0 * PI;
            s.step(&[ph.sin(), (ph - 1.2).sin()]).unwrap();
        }
        assert!((s.com_x() - x0).abs() > 0.2, "dx {}", s.com_x() - x0);
    }
}
