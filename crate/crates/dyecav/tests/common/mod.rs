#![allow(dead_code)]

use dyecav::model::{SceneParams, RHODAMINE_A, RHODAMINE_E};

/// Six modes on an 11x11 grid: small enough for integration tests.
pub fn small_params() -> SceneParams {
    SceneParams {
        max_level: 3,
        a_per_level: RHODAMINE_A[..3].to_vec(),
        e_per_level: RHODAMINE_E[..3].to_vec(),
        density: 1e13,
        n_per_bin: 4e12,
        extent: 3.0,
        gamma_down: 0.25,
        kappa: 1.0,
        coupling_scale: 0.52,
    }
}

pub const SMALL_TOML: &str = r#"
[scene]
max_level = 3
A_per_level = [3.8e-12, 9.2e-12, 23.0e-12]
E_per_level = [5.6e-10, 6.8e-10, 8.2e-10]
density = 1e13
N_per_bin = 4e12
Gamma_down = 0.25
extent = 3.0
coupling_scale = 0.52

[hierarchy]
full_field = true

[experiment]
p_min = 1e-3
p_max = 0.3
points = 5
map_start = [1e-3, 1e-2]
map_end = [3e-2, 0.1]
"#;
