//! Lattice neighbourhoods and symmetric random-walk kernels.
//!
//! A neighbourhood is a finite symmetric set `N ⊂ Z^d` with `0 ∉ N` that
//! generates the full lattice and whose second-moment matrix is isotropic:
//! `Σ_z z_i z_j / |N| = δ_ij σ²`. All axioms are checked in exact integer /
//! rational arithmetic; nothing here is approximate.

use thiserror::Error;

/// A point of `Z^d`, `d ≤ 4`. Stored padded so engines can treat positions
/// uniformly regardless of dimension.
pub type LatticeVector = Vec<i64>;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("site set contains the origin")]
    ContainsOrigin,
    #[error("site set is not symmetric under negation: {0:?} has no mirror")]
    NotSymmetric(LatticeVector),
    #[error("site set does not generate Z^d")]
    NotIrreducible,
    #[error("second-moment matrix is not isotropic")]
    AnisotropicCovariance,
    #[error("weights are not a probability distribution")]
    NotAProbability,
    #[error("empty site set")]
    Empty,
    #[error("duplicate site {0:?}")]
    DuplicateSite(LatticeVector),
    #[error("unsupported dimension {0} (need 2 ≤ d ≤ 4)")]
    BadDimension(usize),
    #[error("|N| = {0} exceeds the subset-table limit of 16 sites")]
    TooManySites(usize),
}

/// A validated interaction neighbourhood.
///
/// Sites are kept in a fixed sorted order; every subset-indexed table in the
/// crate uses bitmask indices over this ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbourhood {
    dim: usize,
    sites: Vec<LatticeVector>,
    sigma2: f64,
}

impl Neighbourhood {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sites in the canonical (lexicographic) order.
    pub fn sites(&self) -> &[LatticeVector] {
        &self.sites
    }

    /// Number of sites `|N|`.
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Per-step variance `σ²` of each coordinate under the uniform kernel.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Largest Euclidean step length over the sites.
    pub fn max_step(&self) -> f64 {
        self.sites
            .iter()
            .map(|z| (z.iter().map(|c| (c * c) as f64).sum::<f64>()).sqrt())
            .fold(0.0, f64::max)
    }

    /// Index of a site in the canonical ordering.
    pub fn site_index(&self, z: &[i64]) -> Option<usize> {
        self.sites.iter().position(|s| s.as_slice() == z)
    }

    /// Nearest-neighbour set `{±e_i}` in dimension `d`.
    pub fn nearest_neighbour(d: usize) -> Neighbourhood {
        let mut sites = Vec::new();
        for i in 0..d {
            for s in [-1i64, 1] {
                let mut z = vec![0i64; d];
                z[i] = s;
                sites.push(z);
            }
        }
        validate_neighbourhood(d, sites).expect("nearest-neighbour set is always valid")
    }

    /// The 8-site unit-box (Moore) set in d=2.
    pub fn moore2() -> Neighbourhood {
        let mut sites = Vec::new();
        for x in -1i64..=1 {
            for y in -1i64..=1 {
                if (x, y) != (0, 0) {
                    sites.push(vec![x, y]);
                }
            }
        }
        validate_neighbourhood(2, sites).expect("Moore set is always valid")
    }
}

/// Index of the sublattice of `Z^d` generated by the rows, via integer
/// (Hermite-style) elimination. `None` when the rows do not span rank `d`.
fn lattice_index(dim: usize, rows: &[LatticeVector]) -> Option<i128> {
    let mut m: Vec<Vec<i128>> = rows
        .iter()
        .map(|r| r.iter().map(|&c| c as i128).collect())
        .collect();
    let mut pivot_row = 0;
    for col in 0..dim {
        loop {
            // Find the row with the smallest nonzero entry in this column.
            let mut best: Option<usize> = None;
            for r in pivot_row..m.len() {
                if m[r][col] != 0
                    && best.map_or(true, |b| m[r][col].abs() < m[b][col].abs())
                {
                    best = Some(r);
                }
            }
            let Some(b) = best else { return None };
            m.swap(pivot_row, b);
            // Reduce every other row below by the pivot.
            let mut again = false;
            for r in pivot_row + 1..m.len() {
                if m[r][col] != 0 {
                    let q = m[r][col] / m[pivot_row][col];
                    for c in 0..dim {
                        m[r][c] -= q * m[pivot_row][c];
                    }
                    again |= m[r][col] != 0;
                }
            }
            if !again {
                break;
            }
        }
        pivot_row += 1;
    }
    Some((0..dim).map(|i| m[i][i].abs()).product())
}

/// Validates the neighbourhood axioms and computes `σ²` exactly.
pub fn validate_neighbourhood(
    dim: usize,
    sites: Vec<LatticeVector>,
) -> Result<Neighbourhood, KernelError> {
    if !(2..=4).contains(&dim) {
        return Err(KernelError::BadDimension(dim));
    }
    if sites.is_empty() {
        return Err(KernelError::Empty);
    }
    if sites.len() > 16 {
        return Err(KernelError::TooManySites(sites.len()));
    }
    let mut sites = sites;
    for s in &sites {
        assert_eq!(s.len(), dim, "site arity must match the dimension");
    }
    sites.sort();
    for w in sites.windows(2) {
        if w[0] == w[1] {
            return Err(KernelError::DuplicateSite(w[0].clone()));
        }
    }
    if sites.iter().any(|z| z.iter().all(|&c| c == 0)) {
        return Err(KernelError::ContainsOrigin);
    }
    for z in &sites {
        let neg: LatticeVector = z.iter().map(|&c| -c).collect();
        if !sites.contains(&neg) {
            return Err(KernelError::NotSymmetric(z.clone()));
        }
    }
    if lattice_index(dim, &sites) != Some(1) {
        return Err(KernelError::NotIrreducible);
    }
    // Second moments in exact integers: Σ z_i z_j must be c·δ_ij.
    let mut moment = vec![vec![0i128; dim]; dim];
    for z in &sites {
        for i in 0..dim {
            for j in 0..dim {
                moment[i][j] += (z[i] * z[j]) as i128;
            }
        }
    }
    let c = moment[0][0];
    for i in 0..dim {
        for j in 0..dim {
            let want = if i == j { c } else { 0 };
            if moment[i][j] != want {
                return Err(KernelError::AnisotropicCovariance);
            }
        }
    }
    if c == 0 {
        return Err(KernelError::AnisotropicCovariance);
    }
    Ok(Neighbourhood {
        dim,
        sigma2: c as f64 / sites.len() as f64,
        sites,
    })
}

/// A symmetric irreducible random-walk step kernel with isotropic covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkKernel {
    neighbourhood: Neighbourhood,
    /// Weight per site, aligned with the neighbourhood's canonical order.
    weights: Vec<f64>,
    sigma2: f64,
}

impl WalkKernel {
    pub fn neighbourhood(&self) -> &Neighbourhood {
        &self.neighbourhood
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Smallest positive weight of the kernel, a uniform lower bound `p̲`.
    pub fn min_positive_weight(&self) -> f64 {
        self.weights
            .iter()
            .copied()
            .filter(|&w| w > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Total weight of a site subset given as a bitmask over the canonical
    /// ordering.
    pub fn mass_of_mask(&self, mask: u32) -> f64 {
        let mut total = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            if mask >> i & 1 == 1 {
                total += w;
            }
        }
        total
    }
}

/// A kernel whose weights live on (a subset of) an ambient neighbourhood.
///
/// The nonzero support must itself satisfy all kernel axioms; the ambient
/// sites with zero weight stay part of the interaction ring, which is what
/// the sign checks on kernel holes exercise.
pub fn kernel_on(
    ambient: &Neighbourhood,
    entries: Vec<(LatticeVector, f64)>,
) -> Result<WalkKernel, KernelError> {
    let support = validate_kernel(ambient.dim(), entries.clone())?;
    let mut weights = vec![0.0; ambient.len()];
    for (z, w) in &entries {
        let Some(i) = ambient.site_index(z) else {
            return Err(KernelError::NotIrreducible);
        };
        weights[i] = *w;
    }
    Ok(WalkKernel {
        neighbourhood: ambient.clone(),
        weights,
        sigma2: support.sigma2,
    })
}

/// The uniform kernel on a neighbourhood.
pub fn kernel_uniform(nbhd: &Neighbourhood) -> WalkKernel {
    let n = nbhd.len();
    WalkKernel {
        neighbourhood: nbhd.clone(),
        weights: vec![1.0 / n as f64; n],
        sigma2: nbhd.sigma2(),
    }
}

/// Validates an explicit weight map as a walk kernel.
///
/// Geometry axioms are exact; the probability and isotropy checks on the
/// floating-point weights use a 1e-12 tolerance.
pub fn validate_kernel(
    dim: usize,
    entries: Vec<(LatticeVector, f64)>,
) -> Result<WalkKernel, KernelError> {
    let support: Vec<LatticeVector> = entries
        .iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|(z, _)| z.clone())
        .collect();
    let nbhd = validate_neighbourhood(dim, support)?;
    let mut weights = vec![0.0; nbhd.len()];
    for (z, w) in &entries {
        if *w < 0.0 {
            return Err(KernelError::NotAProbability);
        }
        if let Some(i) = nbhd.site_index(z) {
            weights[i] = *w;
        }
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(KernelError::NotAProbability);
    }
    for (z, w) in &entries {
        let neg: LatticeVector = z.iter().map(|&c| -c).collect();
        let wneg = nbhd.site_index(&neg).map(|i| weights[i]).unwrap_or(0.0);
        if (w - wneg).abs() > 1e-12 {
            return Err(KernelError::NotSymmetric(z.clone()));
        }
    }
    // Weighted second moments must still be isotropic.
    let mut sigma2 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let mij: f64 = nbhd
                .sites()
                .iter()
                .zip(&weights)
                .map(|(z, w)| w * (z[i] * z[j]) as f64)
                .sum();
            if i == j {
                if i == 0 {
                    sigma2 = mij;
                } else if (mij - sigma2).abs() > 1e-12 {
                    return Err(KernelError::AnisotropicCovariance);
                }
            } else if mij.abs() > 1e-12 {
                return Err(KernelError::AnisotropicCovariance);
            }
        }
    }
    Ok(WalkKernel {
        neighbourhood: nbhd,
        weights,
        sigma2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbour_d2_is_valid_with_sigma2_half() {
        let nn = Neighbourhood::nearest_neighbour(2);
        assert_eq!(nn.len(), 4);
        assert_eq!(nn.sigma2(), 0.5);
    }

    #[test]
    fn moore_d2_is_valid_with_sigma2_three_quarters() {
        let m = Neighbourhood::moore2();
        assert_eq!(m.len(), 8);
        assert_eq!(m.sigma2(), 0.75);
    }

    #[test]
    fn nearest_neighbour_d3_sigma2() {
        let nn = Neighbourhood::nearest_neighbour(3);
        assert_eq!(nn.len(), 6);
        assert!((nn.sigma2() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn axis_only_set_is_not_irreducible() {
        let err = validate_neighbourhood(2, vec![vec![1, 0], vec![-1, 0]]).unwrap_err();
        assert_eq!(err, KernelError::NotIrreducible);
    }

    #[test]
    fn origin_is_rejected() {
        let err =
            validate_neighbourhood(2, vec![vec![0, 0], vec![1, 0], vec![-1, 0]]).unwrap_err();
        assert_eq!(err, KernelError::ContainsOrigin);
    }

    #[test]
    fn asymmetric_set_is_rejected() {
        let err = validate_neighbourhood(
            2,
            vec![vec![1, 0], vec![-1, 0], vec![0, 1], vec![0, -1], vec![1, 1], vec![2, 2]],
        )
        .unwrap_err();
        assert!(matches!(err, KernelError::NotSymmetric(_)));
    }

    #[test]
    fn diagonal_only_set_is_anisotropic_or_reducible() {
        // {±(1,1)} spans only a line; {±(1,1), ±(1,-1)} generates the even
        // sublattice, so it must be rejected as not irreducible.
        let err = validate_neighbourhood(
            2,
            vec![vec![1, 1], vec![-1, -1], vec![1, -1], vec![-1, 1]],
        )
        .unwrap_err();
        assert_eq!(err, KernelError::NotIrreducible);
    }

    #[test]
    fn anisotropic_covariance_is_rejected() {
        // NN plus an extra long step on the x-axis only.
        let err = validate_neighbourhood(
            2,
            vec![vec![1, 0], vec![-1, 0], vec![0, 1], vec![0, -1], vec![2, 0], vec![-2, 0]],
        )
        .unwrap_err();
        assert_eq!(err, KernelError::AnisotropicCovariance);
    }

    #[test]
    fn uniform_kernel_matches_neighbourhood_sigma2() {
        for nbhd in [Neighbourhood::nearest_neighbour(2), Neighbourhood::moore2()] {
            let k = kernel_uniform(&nbhd);
            assert!(k.weights().iter().all(|&w| (w - 1.0 / nbhd.len() as f64).abs() < 1e-15));
            assert_eq!(k.sigma2(), nbhd.sigma2());
            assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_kernel_uniform_nn() {
        let k = validate_kernel(
            2,
            vec![
                (vec![1, 0], 0.25),
                (vec![-1, 0], 0.25),
                (vec![0, 1], 0.25),
                (vec![0, -1], 0.25),
            ],
        )
        .unwrap();
        assert!((k.sigma2() - 0.5).abs() < 1e-15);
        assert!((k.min_positive_weight() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn validate_kernel_rejects_one_axis() {
        let err = validate_kernel(2, vec![(vec![1, 0], 0.5), (vec![-1, 0], 0.5)]).unwrap_err();
        assert_eq!(err, KernelError::NotIrreducible);
    }

    #[test]
    fn validate_kernel_rejects_bad_total() {
        let err = validate_kernel(
            2,
            vec![
                (vec![1, 0], 0.3),
                (vec![-1, 0], 0.3),
                (vec![0, 1], 0.3),
                (vec![0, -1], 0.3),
            ],
        )
        .unwrap_err();
        assert_eq!(err, KernelError::NotAProbability);
    }

    #[test]
    fn site_count_is_always_even() {
        for nbhd in [
            Neighbourhood::nearest_neighbour(2),
            Neighbourhood::nearest_neighbour(3),
            Neighbourhood::moore2(),
        ] {
            assert_eq!(nbhd.len() % 2, 0);
            assert!(nbhd.len() >= 2 * nbhd.dim());
        }
    }
}
