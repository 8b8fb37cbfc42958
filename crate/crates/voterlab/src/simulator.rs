//! Exact continuous-time simulation of spin-flip systems on `Z²` (sparse)
//! or on small torii (dense), built on the graphical construction: every
//! site carries two marked Poisson streams, one attempting `0 → 1` flips and
//! one attempting `1 → 0` flips, and a proposal fires when its uniform mark
//! falls below the current rate.  Coupled components consume the *same*
//! marks, which is what makes monotone couplings between rate functions
//! exact pathwise and not merely in law.
//!
//! The module also houses the 1-biased comparison rate function used to
//! dominate a rescaled perturbation by a voter-type process, and a
//! brute-force uniformization oracle for torii with at most nine sites.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::rates::{Family, Perturbation, RateModel};
use crate::rng::CounterRng;

/// A lattice or torus site (the simulator is two-dimensional).
pub type Site = (i64, i64);

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("horizon must be positive")]
    HorizonNonpositive,
    #[error("active set exceeded the cap of {cap} sites")]
    ActiveSetOverflow { cap: usize },
    #[error("infinite-lattice run requires the all-zero state to be a trap")]
    NoZeroTrap,
    #[error("coupled components must share one neighbourhood and geometry")]
    IncompatibleComponents,
    #[error(
        "comparison condition fails: center {center}, lower ring {lower_ring:#b} rate \
         {lower_rate} vs upper ring {upper_ring:#b} rate {upper_rate}"
    )]
    ComparisonConditionFails {
        center: bool,
        lower_ring: u32,
        upper_ring: u32,
        lower_rate: f64,
        upper_rate: f64,
    },
    #[error("ordering {lo} ≤ {hi} violated at t = {time} site {site:?}")]
    OrderingViolated { time: f64, site: Site, lo: usize, hi: usize },
    #[error("torus oracle limited to at most 9 sites")]
    StateSpaceTooLarge,
}

/// Where the spins live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    /// The infinite plane lattice; only finitely many ones are allowed.
    Lattice,
    /// A periodic `l × l` box with coordinates in `[0, l)`.
    Torus { l: i64 },
}

impl Geometry {
    fn wrap(&self, site: Site) -> Site {
        match *self {
            Geometry::Lattice => site,
            Geometry::Torus { l } => (site.0.rem_euclid(l), site.1.rem_euclid(l)),
        }
    }
}

/// A spin configuration with finite support, tagged with its geometry and
/// the time it was observed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinState {
    geometry: Geometry,
    ones: HashSet<Site>,
    time: f64,
}

impl SpinState {
    /// An infinite-lattice state with the given occupied sites.
    pub fn lattice(ones: impl IntoIterator<Item = Site>) -> SpinState {
        SpinState { geometry: Geometry::Lattice, ones: ones.into_iter().collect(), time: 0.0 }
    }

    /// A torus state; sites are wrapped into `[0, l)²`.
    pub fn torus(l: i64, ones: impl IntoIterator<Item = Site>) -> SpinState {
        assert!(l >= 1);
        let geometry = Geometry::Torus { l };
        let ones = ones.into_iter().map(|s| geometry.wrap(s)).collect();
        SpinState { geometry, ones, time: 0.0 }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn get(&self, site: Site) -> bool {
        self.ones.contains(&self.geometry.wrap(site))
    }

    /// Number of occupied sites.
    pub fn count_ones(&self) -> usize {
        self.ones.len()
    }

    pub fn ones(&self) -> impl Iterator<Item = Site> + '_ {
        self.ones.iter().copied()
    }

    pub fn is_all_zero(&self) -> bool {
        self.ones.is_empty()
    }

    /// Full occupation; only decidable on a torus.
    pub fn is_all_one(&self) -> bool {
        match self.geometry {
            Geometry::Lattice => false,
            Geometry::Torus { l } => self.ones.len() as i64 == l * l,
        }
    }

    /// Torus states as a bitmask with site `(x, y)` at bit `y·l + x`.
    pub fn torus_mask(&self) -> Option<u64> {
        match self.geometry {
            Geometry::Lattice => None,
            Geometry::Torus { l } => {
                let mut mask = 0u64;
                for &(x, y) in &self.ones {
                    mask |= 1 << (y * l + x);
                }
                Some(mask)
            }
        }
    }
}

/// Rates multiplied by the indicator of the open box `(−M₀, M₀)²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KillSpec {
    pub half_width: i64,
}

impl KillSpec {
    pub fn contains(&self, site: Site) -> bool {
        site.0.abs() < self.half_width && site.1.abs() < self.half_width
    }
}

/// One recorded flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub site: Site,
    /// The new spin value at the site.
    pub value: bool,
    /// Which coupled component flipped (0 for plain runs).
    pub component: usize,
}

/// Output of a single-component run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_state: SpinState,
    pub events: Vec<Event>,
}

/// One component of a coupled run.
#[derive(Debug, Clone)]
pub struct ComponentSpec {
    pub model: RateModel,
    pub kill: Option<KillSpec>,
    /// Overrides the shared initial state when present.
    pub initial: Option<SpinState>,
}

impl ComponentSpec {
    pub fn plain(model: RateModel) -> ComponentSpec {
        ComponentSpec { model, kill: None, initial: None }
    }
}

/// A family of spin-flip systems driven by one shared mark stream.
#[derive(Debug, Clone)]
pub struct CoupledSpec {
    pub components: Vec<ComponentSpec>,
    /// Shared initial state for components without an override.
    pub initial: SpinState,
    /// Declared pathwise orderings `lo ≤ hi` by component index; each pair
    /// is certified against the comparison condition at setup and asserted
    /// after every event when `check_orderings` is set.
    pub orderings: Vec<(usize, usize)>,
    pub check_orderings: bool,
    /// Cap on the united active set (None for the default).
    pub active_cap: Option<usize>,
}

/// Output of a coupled run.
#[derive(Debug, Clone)]
pub struct CoupledResult {
    pub final_states: Vec<SpinState>,
    pub events: Vec<Event>,
}

const DEFAULT_ACTIVE_CAP: usize = 1 << 22;

/// Witness-producing check of the comparison condition between two rate
/// functions on the same neighbourhood: for every pair of windows with the
/// lower ring contained in the upper ring, the upper model's `0 → 1` rate
/// dominates and its `1 → 0` rate is dominated.  A pair passing this check
/// stays ordered pathwise under shared marks.
pub fn comparison_condition(lower: &RateModel, upper: &RateModel) -> Result<(), SimError> {
    assert_eq!(
        lower.kernel().neighbourhood().sites(),
        upper.kernel().neighbourhood().sites(),
        "comparison requires a common neighbourhood"
    );
    let n = lower.ring_size();
    let slack = 1e-9 * (1.0 + lower.max_rate().max(upper.max_rate()));
    let (lo0, lo1) = lower.rate_tables();
    let (up0, up1) = upper.rate_tables();
    for upper_ring in 0..(1u32 << n) {
        // All submasks of upper_ring, including 0.
        let mut m = upper_ring;
        loop {
            if up0[upper_ring as usize] < lo0[m as usize] - slack {
                return Err(SimError::ComparisonConditionFails {
                    center: false,
                    lower_ring: m,
                    upper_ring,
                    lower_rate: lo0[m as usize],
                    upper_rate: up0[upper_ring as usize],
                });
            }
            if up1[upper_ring as usize] > lo1[m as usize] + slack {
                return Err(SimError::ComparisonConditionFails {
                    center: true,
                    lower_ring: m,
                    upper_ring,
                    lower_rate: lo1[m as usize],
                    upper_rate: up1[upper_ring as usize],
                });
            }
            if m == 0 {
                break;
            }
            m = (m - 1) & upper_ring;
        }
    }
    Ok(())
}

struct Component {
    model: RateModel,
    kill: Option<KillSpec>,
    ones: HashSet<Site>,
    /// Per site: how many occupied sites lie in its closed neighbourhood.
    refs: HashMap<Site, u32>,
}

struct ActiveSet {
    sites: Vec<Site>,
    pos: HashMap<Site, usize>,
    /// How many components consider the site active.
    multiplicity: HashMap<Site, u32>,
    frozen: bool,
}

impl ActiveSet {
    fn add(&mut self, site: Site) {
        if self.frozen {
            return;
        }
        let m = self.multiplicity.entry(site).or_insert(0);
        *m += 1;
        if *m == 1 {
            self.pos.insert(site, self.sites.len());
            self.sites.push(site);
        }
    }

    fn remove(&mut self, site: Site) {
        if self.frozen {
            return;
        }
        let m = self.multiplicity.get_mut(&site).expect("removing inactive site");
        *m -= 1;
        if *m == 0 {
            self.multiplicity.remove(&site);
            let i = self.pos.remove(&site).expect("site indexed");
            let last = self.sites.pop().expect("non-empty active set");
            if last != site {
                self.sites[i] = last;
                self.pos.insert(last, i);
            }
        }
    }
}

struct Engine {
    geometry: Geometry,
    offsets: Vec<Site>,
    bar_offsets: Vec<Site>,
    c_max: f64,
    components: Vec<Component>,
    active: ActiveSet,
    orderings: Vec<(usize, usize)>,
    check_orderings: bool,
    active_cap: usize,
    time: f64,
    events: Vec<Event>,
}

impl Engine {
    fn new(spec: &CoupledSpec) -> Result<Engine, SimError> {
        assert!(!spec.components.is_empty(), "need at least one component");
        let nbhd = spec.components[0].model.kernel().neighbourhood();
        if nbhd.dim() != 2 {
            return Err(SimError::IncompatibleComponents);
        }
        let offsets: Vec<Site> = nbhd.sites().iter().map(|s| (s[0], s[1])).collect();
        let mut bar_offsets = offsets.clone();
        bar_offsets.push((0, 0));
        let geometry = spec.initial.geometry();

        let mut c_max = 0.0f64;
        for comp in &spec.components {
            if comp.model.kernel().neighbourhood().sites() != nbhd.sites() {
                return Err(SimError::IncompatibleComponents);
            }
            if let Some(init) = &comp.initial {
                if init.geometry() != geometry {
                    return Err(SimError::IncompatibleComponents);
                }
            }
            c_max = c_max.max(comp.model.max_rate());
        }

        // Off the support's dilation every rate must vanish, otherwise the
        // lattice dynamics have infinite total intensity.  On a torus a
        // spontaneous-birth model is still finite: freeze the full site set
        // as permanently active instead.
        let needs_zero_trap = spec.components.iter().any(|c| c.model.rate_unchecked(false, 0) > 0.0);
        let frozen = match geometry {
            Geometry::Lattice => {
                if needs_zero_trap {
                    return Err(SimError::NoZeroTrap);
                }
                false
            }
            Geometry::Torus { .. } => needs_zero_trap,
        };

        for &(lo, hi) in &spec.orderings {
            comparison_condition(&spec.components[lo].model, &spec.components[hi].model)?;
        }

        let mut active =
            ActiveSet { sites: Vec::new(), pos: HashMap::new(), multiplicity: HashMap::new(), frozen };
        if frozen {
            if let Geometry::Torus { l } = geometry {
                for x in 0..l {
                    for y in 0..l {
                        active.sites.push((x, y));
                    }
                }
            }
        }

        let mut engine = Engine {
            geometry,
            offsets,
            bar_offsets,
            c_max,
            components: Vec::new(),
            active,
            orderings: spec.orderings.clone(),
            check_orderings: spec.check_orderings,
            active_cap: spec.active_cap.unwrap_or(DEFAULT_ACTIVE_CAP),
            time: spec.initial.time(),
            events: Vec::new(),
        };

        for comp in &spec.components {
            let base = comp.initial.as_ref().unwrap_or(&spec.initial);
            let mut ones: Vec<Site> = base.ones.iter().copied().collect();
            if let Some(kill) = comp.kill {
                // Occupation outside the kill box is erased at time zero.
                ones.retain(|&s| kill.contains(s));
            }
            // Hash-set iteration order is nondeterministic; the active-set
            // layout (and hence the mark stream consumption) must not be.
            ones.sort_unstable();
            engine.components.push(Component {
                model: comp.model.clone(),
                kill: comp.kill,
                ones: HashSet::new(),
                refs: HashMap::new(),
            });
            let idx = engine.components.len() - 1;
            for site in ones {
                engine.set_spin(idx, site, true, f64::NAN, false);
            }
        }
        engine.events.clear();

        if spec.check_orderings {
            for &(lo, hi) in &spec.orderings {
                for &site in &engine.components[lo].ones {
                    if !engine.components[hi].ones.contains(&site) {
                        return Err(SimError::OrderingViolated {
                            time: engine.time,
                            site,
                            lo,
                            hi,
                        });
                    }
                }
            }
        }
        Ok(engine)
    }

    /// Flips one component's spin at `site`, maintaining the dilation
    /// reference counts and the united active set.
    fn set_spin(&mut self, comp: usize, site: Site, value: bool, time: f64, log: bool) {
        let changed = if value {
            self.components[comp].ones.insert(site)
        } else {
            self.components[comp].ones.remove(&site)
        };
        debug_assert!(changed, "redundant flip");
        if log {
            self.events.push(Event { time, site, value, component: comp });
        }
        for i in 0..self.bar_offsets.len() {
            let o = self.bar_offsets[i];
            let y = self.geometry.wrap((site.0 + o.0, site.1 + o.1));
            if value {
                let r = self.components[comp].refs.entry(y).or_insert(0);
                *r += 1;
                if *r == 1 {
                    self.active.add(y);
                }
            } else {
                let r = self.components[comp].refs.get_mut(&y).expect("ref underflow");
                *r -= 1;
                if *r == 0 {
                    self.components[comp].refs.remove(&y);
                    self.active.remove(y);
                }
            }
        }
    }

    fn window(&self, comp: usize, site: Site) -> (bool, u32) {
        let c = &self.components[comp];
        let center = c.ones.contains(&site);
        let mut ring = 0u32;
        for (i, &o) in self.offsets.iter().enumerate() {
            let y = self.geometry.wrap((site.0 + o.0, site.1 + o.1));
            if c.ones.contains(&y) {
                ring |= 1 << i;
            }
        }
        (center, ring)
    }

    fn rate(&self, comp: usize, site: Site) -> f64 {
        let c = &self.components[comp];
        if let Some(kill) = c.kill {
            if !kill.contains(site) {
                return 0.0;
            }
        }
        let (center, ring) = self.window(comp, site);
        c.model.rate_unchecked(center, ring)
    }

    fn run(&mut self, horizon: f64, seed: u64) -> Result<(), SimError> {
        if horizon <= 0.0 {
            return Err(SimError::HorizonNonpositive);
        }
        let mut rng = CounterRng::from_key(&[seed, 0x5349_4d55_4c41_5445]);
        let end = self.time + horizon;
        loop {
            let a = self.active.sites.len();
            if a == 0 {
                // Everything is trapped; nothing can ever fire again.
                self.time = end;
                return Ok(());
            }
            if a > self.active_cap {
                return Err(SimError::ActiveSetOverflow { cap: self.active_cap });
            }
            // Two mark streams per active site, each thinned at c_max.
            self.time += rng.exp(2.0 * self.c_max * a as f64);
            if self.time >= end {
                self.time = end;
                return Ok(());
            }
            let site = self.active.sites[rng.below(a)];
            // Stream 0 attempts 0 → 1 flips, stream 1 attempts 1 → 0.
            let stream = rng.next_u64_fast() & 1 == 1;
            let u = rng.uniform() * self.c_max;
            let mut flipped = false;
            for j in 0..self.components.len() {
                let center = self.components[j].ones.contains(&site);
                if center != stream {
                    continue;
                }
                if u <= self.rate(j, site) {
                    let t = self.time;
                    self.set_spin(j, site, !center, t, true);
                    flipped = true;
                }
            }
            if flipped && self.check_orderings {
                for &(lo, hi) in &self.orderings {
                    if self.components[lo].ones.contains(&site)
                        && !self.components[hi].ones.contains(&site)
                    {
                        return Err(SimError::OrderingViolated { time: self.time, site, lo, hi });
                    }
                }
            }
        }
    }

    fn state_of(&self, comp: usize) -> SpinState {
        SpinState {
            geometry: self.geometry,
            ones: self.components[comp].ones.clone(),
            time: self.time,
        }
    }
}

/// Simulates one spin-flip system exactly up to the horizon.
pub fn run(
    model: &RateModel,
    initial: &SpinState,
    horizon: f64,
    seed: u64,
) -> Result<RunResult, SimError> {
    let spec = CoupledSpec {
        components: vec![ComponentSpec::plain(model.clone())],
        initial: initial.clone(),
        orderings: Vec::new(),
        check_orderings: false,
        active_cap: None,
    };
    let mut engine = Engine::new(&spec)?;
    engine.run(horizon, seed)?;
    Ok(RunResult { final_state: engine.state_of(0), events: engine.events })
}

/// Simulates the killed system: rates (and the initial state) are restricted
/// to the open box `(−M₀, M₀)²`; outside it nothing ever flips.
pub fn killed_run(
    model: &RateModel,
    kill: KillSpec,
    initial: &SpinState,
    horizon: f64,
    seed: u64,
) -> Result<RunResult, SimError> {
    let spec = CoupledSpec {
        components: vec![ComponentSpec { model: model.clone(), kill: Some(kill), initial: None }],
        initial: initial.clone(),
        orderings: Vec::new(),
        check_orderings: false,
        active_cap: None,
    };
    let mut engine = Engine::new(&spec)?;
    engine.run(horizon, seed)?;
    Ok(RunResult { final_state: engine.state_of(0), events: engine.events })
}

/// Runs several components against one shared mark stream.  Declared
/// orderings are certified by [`comparison_condition`] at setup and, when
/// requested, re-asserted after every event.
pub fn run_coupled(spec: &CoupledSpec, horizon: f64, seed: u64) -> Result<CoupledResult, SimError> {
    let mut engine = Engine::new(spec)?;
    engine.run(horizon, seed)?;
    let final_states = (0..spec.components.len()).map(|j| engine.state_of(j)).collect();
    Ok(CoupledResult { final_states, events: engine.events })
}

/// Total flip intensity of a state: the sum of the model's rate over every
/// site whose closed neighbourhood meets the support.
pub fn total_flip_rate(model: &RateModel, state: &SpinState) -> f64 {
    let nbhd = model.kernel().neighbourhood();
    let mut active: HashSet<Site> = HashSet::new();
    for site in state.ones() {
        active.insert(state.geometry().wrap(site));
        for o in nbhd.sites() {
            active.insert(state.geometry().wrap((site.0 + o[0], site.1 + o[1])));
        }
    }
    let mut total = 0.0;
    for site in active {
        let center = state.get(site);
        let mut ring = 0u32;
        for (i, o) in nbhd.sites().iter().enumerate() {
            if state.get((site.0 + o[0], site.1 + o[1])) {
                ring |= 1 << i;
            }
        }
        total += model.rate_unchecked(center, ring);
    }
    total
}

/// The slowdown factor `w_N = 1 − (‖r‖ / p̲)·ε_N` applied to the voter part
/// of the 1-biased comparison rates, with `ε_N = (log N)³ / N`.
pub fn w_n(norm_r: f64, p_min: f64, n_scale: f64) -> f64 {
    let eps_n = n_scale.ln().powi(3) / n_scale;
    1.0 - norm_r / p_min * eps_n
}

/// Builds the 1-biased comparison rate function for a perturbation family
/// at scale `N`:
///
/// * `0 → 1`: `N·w_N·(voter rate) + (2 + p̲⁻¹)·‖r‖·(log N)³·n₁`, where `n₁`
///   counts occupied neighbourhood sites;
/// * `1 → 0`: `N·w_N·(voter rate)` — the bias only ever adds ones.
///
/// Its comparison condition against `N·c_{ε_N}` holds window by window, so
/// the coupled biased process dominates the rescaled perturbation pathwise.
pub fn biased_voter_model(pert: &Perturbation, n_scale: f64) -> Result<RateModel, crate::rates::RateError> {
    let kernel = pert.kernel().clone();
    let norm_r = pert.asymptotic_rates()?.norm_r;
    let p_min = kernel.min_positive_weight();
    let w = w_n(norm_r, p_min, n_scale);
    let voter = RateModel::new(Family::Voter, kernel.clone());
    let (v0, v1) = voter.rate_tables();
    let coef = (2.0 + 1.0 / p_min) * norm_r * n_scale.ln().powi(3);
    let rate0: Vec<f64> =
        v0.iter().enumerate().map(|(m, &v)| n_scale * w * v + coef * (m as u32).count_ones() as f64).collect();
    let rate1: Vec<f64> = v1.iter().map(|&v| n_scale * w * v).collect();
    Ok(RateModel::tabulated(kernel, rate0, rate1))
}

/// The rescaled perturbation rates `c^N = N · c_{ε_N}` with
/// `ε_N = (log N)³/N`.
pub fn rescaled_model(pert: &Perturbation, n_scale: f64) -> RateModel {
    let eps_n = n_scale.ln().powi(3) / n_scale;
    pert.model_at(eps_n).scaled(n_scale)
}

/// Exact-to-tolerance distribution of a spin-flip system on a torus with at
/// most nine sites, via uniformization of the 2^{L²}-state generator.  Entry
/// `s` of the result is the probability of the configuration whose bitmask
/// is `s` (site `(x, y)` at bit `y·l + x`).
pub fn oracle_distribution(
    model: &RateModel,
    l: i64,
    initial: &SpinState,
    t: f64,
) -> Result<Vec<f64>, SimError> {
    let sites = (l * l) as usize;
    if sites > 9 {
        return Err(SimError::StateSpaceTooLarge);
    }
    let geometry = Geometry::Torus { l };
    let nbhd = model.kernel().neighbourhood();
    // neighbour_index[site][ring position] = torus site index read by that bit.
    let mut neighbour_index = vec![vec![0usize; nbhd.len()]; sites];
    for x in 0..l {
        for y in 0..l {
            for (i, o) in nbhd.sites().iter().enumerate() {
                let (nx, ny) = geometry.wrap((x + o[0], y + o[1]));
                neighbour_index[(y * l + x) as usize][i] = (ny * l + nx) as usize;
            }
        }
    }

    let states = 1usize << sites;
    // Flip rate out of each state for each site.
    let mut flip = vec![vec![0.0f64; sites]; states];
    for (s, row) in flip.iter_mut().enumerate() {
        for (x, slot) in row.iter_mut().enumerate() {
            let center = s >> x & 1 == 1;
            let mut ring = 0u32;
            for (i, &ni) in neighbour_index[x].iter().enumerate() {
                if s >> ni & 1 == 1 {
                    ring |= 1 << i;
                }
            }
            *slot = model.rate_unchecked(center, ring);
        }
    }

    let lambda = (sites as f64 * model.max_rate()).max(1e-12);
    let mut p = vec![0.0f64; states];
    p[initial.torus_mask().expect("torus initial state") as usize] = 1.0;

    // Split long horizons so the leading Poisson weight e^{−λΔ} stays
    // representable.
    let mut remaining = t;
    while remaining > 0.0 {
        let dt = remaining.min(600.0 / lambda);
        remaining -= dt;
        let mu = lambda * dt;
        let mut dist = vec![0.0f64; states];
        let mut weight = (-mu).exp();
        let mut cumulative = 0.0;
        let mut k = 0u64;
        loop {
            for (d, &v) in dist.iter_mut().zip(&p) {
                *d += weight * v;
            }
            cumulative += weight;
            if cumulative >= 1.0 - 1e-13 && k as f64 >= mu {
                break;
            }
            // One step of the uniformized chain: p ← pP with
            // P = I + Q/λ.
            let mut next = vec![0.0f64; states];
            for (s, &mass) in p.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let mut out = 0.0;
                for (x, &rate) in flip[s].iter().enumerate() {
                    if rate > 0.0 {
                        next[s ^ (1 << x)] += mass * rate / lambda;
                        out += rate / lambda;
                    }
                }
                next[s] += mass * (1.0 - out);
            }
            p = next;
            k += 1;
            weight *= mu / k as f64;
        }
        p = dist;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_uniform, Neighbourhood};
    use crate::rates::PerturbationKind;
    use crate::stats::{ks_critical, ks_statistic_exponential};

    fn nn_kernel() -> crate::kernels::WalkKernel {
        kernel_uniform(&Neighbourhood::nearest_neighbour(2))
    }

    fn voter() -> RateModel {
        RateModel::new(Family::Voter, nn_kernel())
    }

    fn qvoter(q: f64) -> RateModel {
        RateModel::new(Family::QVoter { q }, nn_kernel())
    }

    #[test]
    fn all_zero_initial_state_stays_trapped() {
        let result = run(&voter(), &SpinState::lattice([]), 10.0, 7).unwrap();
        assert!(result.events.is_empty());
        assert!(result.final_state.is_all_zero());
        assert_eq!(result.final_state.time(), 10.0);
    }

    #[test]
    fn single_one_has_total_intensity_two_for_the_voter_model() {
        // The occupied origin flips at rate f₀ = 1 and each of its four
        // neighbours at rate f₁ = 1/4.
        let state = SpinState::lattice([(0, 0)]);
        assert!((total_flip_rate(&voter(), &state) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_one_torus_is_a_trap_for_every_family() {
        let l = 3;
        let full: Vec<Site> = (0..l).flat_map(|x| (0..l).map(move |y| (x, y))).collect();
        for model in [
            voter(),
            qvoter(0.9),
            RateModel::new(Family::LotkaVolterra { alpha0: 0.7, alpha1: 0.9 }, nn_kernel()),
            RateModel::new(Family::Affine { alpha: 0.8 }, nn_kernel()),
            RateModel::new(Family::Geometric { theta: 0.6 }, nn_kernel()),
            RateModel::new(Family::Threshold, nn_kernel()),
        ] {
            let result = run(&model, &SpinState::torus(l, full.clone()), 2.0, 3).unwrap();
            assert!(result.events.is_empty());
            assert!(result.final_state.is_all_one());
        }
    }

    #[test]
    fn nonpositive_horizon_is_rejected() {
        let err = run(&voter(), &SpinState::lattice([(0, 0)]), 0.0, 1).unwrap_err();
        assert_eq!(err, SimError::HorizonNonpositive);
    }

    #[test]
    fn lattice_runs_require_the_zero_trap() {
        // A spontaneous-birth table: rate0 positive even on the empty window.
        let model = RateModel::tabulated(nn_kernel(), vec![0.5; 16], vec![0.5; 16]);
        let err = run(&model, &SpinState::lattice([(0, 0)]), 1.0, 1).unwrap_err();
        assert_eq!(err, SimError::NoZeroTrap);
        // The same model is fine on a torus.
        run(&model, &SpinState::torus(2, [(0, 0)]), 1.0, 1).unwrap();
    }

    #[test]
    fn active_set_cap_is_enforced() {
        let spec = CoupledSpec {
            components: vec![ComponentSpec::plain(voter())],
            initial: SpinState::lattice((0..30).map(|i| (3 * i, 0))),
            orderings: Vec::new(),
            check_orderings: false,
            active_cap: Some(10),
        };
        let err = run_coupled(&spec, 1.0, 1).unwrap_err();
        assert!(matches!(err, SimError::ActiveSetOverflow { cap: 10 }));
    }

    #[test]
    fn interevent_times_are_exponential() {
        // A single-site torus with constant rate λ flips at rate λ from
        // either state, so inter-event gaps are iid Exponential(λ).
        let lambda = 0.7;
        let model = RateModel::tabulated(nn_kernel(), vec![lambda; 16], vec![lambda; 16]);
        let mut gaps = Vec::new();
        let mut seed = 0;
        while gaps.len() < 100_000 {
            seed += 1;
            let result = run(&model, &SpinState::torus(1, [(0, 0)]), 200.0, seed).unwrap();
            let mut last = 0.0;
            for e in &result.events {
                gaps.push(e.time - last);
                last = e.time;
            }
        }
        gaps.truncate(100_000);
        let d = ks_statistic_exponential(&mut gaps, lambda);
        assert!(d < ks_critical(100_000, 1e-3), "KS statistic {d}");
    }

    #[test]
    fn killed_run_with_unit_box_flips_the_origin_once() {
        let result =
            killed_run(&voter(), KillSpec { half_width: 1 }, &SpinState::lattice([(0, 0)]), 1e4, 5)
                .unwrap();
        assert_eq!(result.events.len(), 1);
        assert_eq!(result.events[0].site, (0, 0));
        assert!(!result.events[0].value);
        assert!(result.final_state.is_all_zero());
    }

    #[test]
    fn killed_run_erases_outside_ones_at_time_zero() {
        let result = killed_run(
            &voter(),
            KillSpec { half_width: 2 },
            &SpinState::lattice([(0, 0), (5, 5)]),
            0.001,
            5,
        )
        .unwrap();
        assert!(!result.final_state.get((5, 5)));
    }

    #[test]
    fn huge_kill_box_reproduces_the_plain_run() {
        let initial = SpinState::lattice([(0, 0), (1, 0), (0, 1)]);
        let plain = run(&qvoter(0.9), &initial, 3.0, 42).unwrap();
        let killed =
            killed_run(&qvoter(0.9), KillSpec { half_width: 1_000 }, &initial, 3.0, 42).unwrap();
        assert_eq!(plain.events, killed.events);
        assert_eq!(plain.final_state, killed.final_state);
    }

    #[test]
    fn identical_components_share_one_trajectory() {
        let spec = CoupledSpec {
            components: vec![
                ComponentSpec::plain(qvoter(0.85)),
                ComponentSpec::plain(qvoter(0.85)),
            ],
            initial: SpinState::lattice([(0, 0), (1, 0), (1, 1)]),
            orderings: vec![(0, 1), (1, 0)],
            check_orderings: true,
            active_cap: None,
        };
        let result = run_coupled(&spec, 5.0, 99).unwrap();
        assert_eq!(result.final_states[0].ones, result.final_states[1].ones);
        // Every event fires in both components at the same instant.
        assert_eq!(result.events.len() % 2, 0);
        for pair in result.events.chunks(2) {
            assert_eq!(pair[0].time, pair[1].time);
            assert_eq!(pair[0].site, pair[1].site);
            assert_eq!(pair[0].value, pair[1].value);
        }
    }

    #[test]
    fn killed_component_stays_below_the_unkilled_one() {
        let model = qvoter(0.9);
        // Same model: the comparison condition reduces to monotonicity.
        comparison_condition(&model, &model).unwrap();
        let spec = CoupledSpec {
            components: vec![
                ComponentSpec {
                    model: model.clone(),
                    kill: Some(KillSpec { half_width: 3 }),
                    initial: None,
                },
                ComponentSpec::plain(model),
            ],
            initial: SpinState::lattice(
                (-2..=2).flat_map(|x| (-2..=2).map(move |y| (x, y))),
            ),
            orderings: vec![(0, 1)],
            check_orderings: true,
            active_cap: None,
        };
        let result = run_coupled(&spec, 4.0, 11).unwrap();
        for site in result.final_states[0].ones() {
            assert!(result.final_states[1].get(site));
        }
        assert!(result.events.len() > 50, "coupling exercised too few events");
    }

    #[test]
    fn comparison_condition_fails_for_crossed_models() {
        // The threshold model does not dominate the voter model as an upper
        // process: with a single occupied neighbour the 1 → 0 rate of the
        // threshold model (1) exceeds the voter rate (3/4 with three empty).
        let err = comparison_condition(&voter(), &RateModel::new(Family::Threshold, nn_kernel()));
        assert!(matches!(err, Err(SimError::ComparisonConditionFails { .. })));
    }

    #[test]
    fn w_n_matches_the_hand_computed_value() {
        let w = w_n(1.0, 0.25, 1e6);
        assert!((w - (1.0 - 4.0 * 1e6f64.ln().powi(3) / 1e6)).abs() < 1e-15);
        assert!((w - 0.98945).abs() < 1e-4, "w_N = {w}");
    }

    #[test]
    fn biased_voter_keeps_the_all_one_trap() {
        let pert = Perturbation::new(PerturbationKind::QVoter, nn_kernel());
        let model = biased_voter_model(&pert, 1e4).unwrap();
        // Centre 1, all neighbours 1: the voter part vanishes and the bias
        // only applies to unoccupied centres.
        assert_eq!(model.rate_unchecked(true, 0b1111), 0.0);
        assert!(model.has_both_traps());
    }

    #[test]
    fn biased_voter_dominates_the_rescaled_perturbation() {
        for kind in [
            PerturbationKind::QVoter,
            PerturbationKind::LotkaVolterra { beta0: 0.4, beta1: 0.8 },
            PerturbationKind::Affine,
            PerturbationKind::Geometric,
        ] {
            let pert = Perturbation::new(kind, nn_kernel());
            let lower = rescaled_model(&pert, 1e4);
            let upper = biased_voter_model(&pert, 1e4).unwrap();
            comparison_condition(&lower, &upper).unwrap();
        }
    }

    #[test]
    fn biased_voter_coupling_holds_over_many_events() {
        let pert = Perturbation::new(PerturbationKind::QVoter, nn_kernel());
        let n_scale = 1e4;
        let lower = rescaled_model(&pert, n_scale);
        let upper = biased_voter_model(&pert, n_scale).unwrap();
        let spec = CoupledSpec {
            components: vec![ComponentSpec::plain(lower), ComponentSpec::plain(upper)],
            initial: SpinState::lattice((-1..=1).flat_map(|x| (-1..=1).map(move |y| (x, y)))),
            orderings: vec![(0, 1)],
            check_orderings: true,
            active_cap: None,
        };
        // Rates are O(N), so a short horizon already yields many events.
        let result = run_coupled(&spec, 2e-3, 17).unwrap();
        assert!(result.events.len() > 2_000, "only {} events", result.events.len());
        for site in result.final_states[0].ones() {
            assert!(result.final_states[1].get(site));
        }
    }

    #[test]
    fn oracle_at_time_zero_is_a_point_mass() {
        let initial = SpinState::torus(3, [(0, 0), (1, 1)]);
        let p = oracle_distribution(&qvoter(0.9), 3, &initial, 1e-12).unwrap();
        let idx = initial.torus_mask().unwrap() as usize;
        assert!((p[idx] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_probabilities_sum_to_one() {
        let initial = SpinState::torus(3, [(0, 0), (2, 1), (1, 2)]);
        for t in [0.3, 1.0, 5.0] {
            let p = oracle_distribution(&qvoter(0.9), 3, &initial, t).unwrap();
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "t = {t}: total {total}");
            assert!(p.iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn oracle_rejects_large_torii() {
        let initial = SpinState::torus(4, [(0, 0)]);
        assert_eq!(
            oracle_distribution(&voter(), 4, &initial, 1.0).unwrap_err(),
            SimError::StateSpaceTooLarge
        );
    }

    #[test]
    fn torus_voter_density_is_a_martingale_and_absorbs_at_the_right_mass() {
        let initial = SpinState::torus(3, [(1, 1)]);
        for t in [0.5, 2.0, 10.0] {
            let p = oracle_distribution(&voter(), 3, &initial, t).unwrap();
            let mean_density: f64 = p
                .iter()
                .enumerate()
                .map(|(s, &v)| v * (s.count_ones() as f64 / 9.0))
                .sum();
            assert!((mean_density - 1.0 / 9.0).abs() < 1e-10, "t = {t}");
        }
        // For large t nearly all mass is on the traps, split 8/9 vs 1/9.
        let p = oracle_distribution(&voter(), 3, &initial, 200.0).unwrap();
        assert!((p[0] - 8.0 / 9.0).abs() < 1e-3);
        assert!((p[511] - 1.0 / 9.0).abs() < 1e-3);
    }

    #[test]
    fn monte_carlo_matches_the_oracle_on_a_small_torus() {
        let model = qvoter(0.9);
        let initial = SpinState::torus(3, [(0, 0), (1, 0), (1, 1)]);
        let t = 1.0;
        let oracle = oracle_distribution(&model, 3, &initial, t).unwrap();
        let reps = 30_000u64;
        let mut counts = vec![0u64; 512];
        for rep in 0..reps {
            let result = run(&model, &initial, t, crate::rng::mix_key(&[2024, rep])).unwrap();
            counts[result.final_state.torus_mask().unwrap() as usize] += 1;
        }
        // Empirical absorption probability vs oracle, three standard errors.
        let p0_hat = counts[0] as f64 / reps as f64;
        let se = (oracle[0] * (1.0 - oracle[0]) / reps as f64).sqrt();
        assert!((p0_hat - oracle[0]).abs() < 3.0 * se, "{p0_hat} vs {}", oracle[0]);
        // Total variation against the 3-sigma multinomial envelope.
        let tv: f64 = counts
            .iter()
            .zip(&oracle)
            .map(|(&c, &p)| (c as f64 / reps as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        let envelope: f64 = oracle
            .iter()
            .map(|&p| 3.0 * (p * (1.0 - p) / reps as f64).sqrt())
            .sum::<f64>()
            / 2.0;
        assert!(tv < envelope, "TV {tv} vs envelope {envelope}");
    }

    #[test]
    fn runs_are_reproducible() {
        let initial = SpinState::lattice([(0, 0), (1, 0)]);
        let a = run(&qvoter(0.95), &initial, 2.0, 123).unwrap();
        let b = run(&qvoter(0.95), &initial, 2.0, 123).unwrap();
        assert_eq!(a.events, b.events);
        let c = run(&qvoter(0.95), &initial, 2.0, 124).unwrap();
        assert!(a.events != c.events || a.final_state == c.final_state);
    }
}
