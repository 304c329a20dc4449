//! Pairwise force fields for the desk-scale systems, reduced units.

use crate::linalg::Vector;
use std::collections::HashSet;

/// External forces acting on the atoms.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceField {
    /// No external forces.
    None,
    /// Pairwise Lennard-Jones between all atom pairs except the excluded
    /// (bonded) ones.
    LennardJones { epsilon: f64, sigma: f64 },
}

impl ForceField {
    /// Forces on all atoms as a flat 3N vector. `excluded` holds normalized
    /// `(min, max)` atom index pairs that do not interact.
    pub fn evaluate(
        &self,
        positions: &Vector,
        n_atoms: usize,
        excluded: &HashSet<(usize, usize)>,
    ) -> Vector {
        let mut forces = Vector::zeros(3 * n_atoms);
        match self {
            ForceField::None => forces,
            ForceField::LennardJones { epsilon, sigma } => {
                for i in 0..n_atoms {
                    for j in i + 1..n_atoms {
                        if excluded.contains(&(i, j)) {
                            continue;
                        }
                        let mut delta = [0.0; 3];
                        let mut r2 = 0.0;
                        for c in 0..3 {
                            delta[c] = positions[3 * i + c] - positions[3 * j + c];
                            r2 += delta[c] * delta[c];
                        }
                        let s2 = sigma * sigma / r2;
                        let s6 = s2 * s2 * s2;
                        // -dU/dr / r for U = 4 eps (s^12 - s^6)
                        let magnitude_over_r = 24.0 * epsilon * (2.0 * s6 * s6 - s6) / r2;
                        for c in 0..3 {
                            let f = magnitude_over_r * delta[c];
                            forces[3 * i + c] += f;
                            forces[3 * j + c] -= f;
                        }
                    }
                }
                forces
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_forces_is_zero() {
        let q = Vector::from_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let f = ForceField::None.evaluate(&q, 2, &HashSet::new());
        assert_eq!(f.as_slice(), &[0.0; 6]);
    }

    #[test]
    fn lj_pair_at_minimum_distance_has_zero_force() {
        let r_min = 2f64.powf(1.0 / 6.0);
        let q = Vector::from_slice(&[0.0, 0.0, 0.0, r_min, 0.0, 0.0]);
        let f = ForceField::LennardJones {
            epsilon: 1.0,
            sigma: 1.0,
        }
        .evaluate(&q, 2, &HashSet::new());
        for c in f.iter() {
            assert!(c.abs() < 1e-14);
        }
    }

    #[test]
    fn lj_forces_are_pairwise_opposite() {
        let q = Vector::from_slice(&[0.0, 0.1, -0.2, 1.3, 0.4, 0.5, -0.7, 1.1, 0.3]);
        let f = ForceField::LennardJones {
            epsilon: 0.5,
            sigma: 1.0,
        }
        .evaluate(&q, 3, &HashSet::new());
        for c in 0..3 {
            let total: f64 = (0..3).map(|i| f[3 * i + c]).sum();
            assert!(total.abs() < 1e-12, "net force component {total:e}");
        }
    }

    #[test]
    fn excluded_pair_does_not_interact() {
        let q = Vector::from_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let mut excluded = HashSet::new();
        excluded.insert((0, 1));
        let f = ForceField::LennardJones {
            epsilon: 1.0,
            sigma: 1.0,
        }
        .evaluate(&q, 2, &excluded);
        assert_eq!(f.as_slice(), &[0.0; 6]);
    }
}
