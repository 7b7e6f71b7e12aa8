//! Ready-made maps used by the tests, the examples and the command line.

use crate::torus::{Harmonic, LatticeMatrix, MapSpec, ShearTerm};

/// The unperturbed cat map `(2 1; 1 1)`.
pub fn cat_map() -> MapSpec {
    MapSpec::cat()
}

/// The cat map after two shears of amplitude `eps`:
/// `y += eps·sin 2πx`, then `x += eps·(½ sin 2πy + ½ cos 2πy − ½ cos 4πy)`.
pub fn perturbed_cat(eps: f64) -> MapSpec {
    let h1 = ShearTerm::new(0, 1, eps, vec![Harmonic::sine(1, 1.0)]).expect("valid shear");
    let h2 = ShearTerm::new(
        1,
        0,
        eps,
        vec![
            Harmonic { freq: 1, sin: 0.5, cos: 0.5 },
            Harmonic { freq: 2, sin: 0.0, cos: -0.5 },
        ],
    )
    .expect("valid shear");
    MapSpec::new(LatticeMatrix::cat(), vec![h1, h2]).expect("axes in range")
}

/// Integer shear `S = I + E₂₁` (adds coordinate 0 to coordinate 1) on `Z⁴`.
pub fn cat4_conjugator() -> [[i64; 4]; 4] {
    [[1, 0, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
}

/// `S·(C ⊕ C)·S⁻¹` where `C` is the cat matrix acting on coordinates
/// `(0, 2)` and `(1, 3)`.
pub fn cat4_matrix() -> Vec<Vec<i64>> {
    // C ⊕ C with blocks on (0,2) and (1,3)
    let sum = [[2, 0, 1, 0], [0, 2, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]];
    let s = cat4_conjugator();
    let s_inv = [[1, 0, 0, 0], [-1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]];
    let mul = |a: &[[i64; 4]; 4], b: &[[i64; 4]; 4]| {
        let mut m = [[0i64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    mul(&mul(&s, &sum), &s_inv).iter().map(|r| r.to_vec()).collect()
}

/// The linear 4-torus automorphism of [`cat4_matrix`].
pub fn cat4() -> MapSpec {
    MapSpec::linear_only(LatticeMatrix::new(cat4_matrix()).expect("hyperbolic"))
}

/// [`cat4`] after shears of amplitude `eps` coupling the two cat factors.
pub fn perturbed_cat4(eps: f64) -> MapSpec {
    let shear = |source, target, f| ShearTerm::new(source, target, eps, vec![Harmonic::sine(f, 1.0)]).expect("valid");
    MapSpec::new(
        LatticeMatrix::new(cat4_matrix()).expect("hyperbolic"),
        vec![shear(0, 1, 1), shear(2, 3, 1), shear(1, 2, 2), shear(3, 0, 1)],
    )
    .expect("axes in range")
}
