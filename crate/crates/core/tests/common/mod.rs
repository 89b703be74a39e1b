#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srcot::{BoundaryCondition, BoundaryData, SpaceTimeMesh};

/// Cell values `f(x, y)` sampled at cell centres, row-major in `y`.
pub fn cell_field(nx: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let h = 1.0 / nx as f64;
    (0..nx * nx).map(|i| f(((i % nx) as f64 + 0.5) * h, ((i / nx) as f64 + 0.5) * h)).collect()
}

/// Indicator of the axis-aligned box `[x0, x1) x [y0, y1)`.
pub fn boxed(x: f64, y: f64, [x0, x1, y0, y1]: [f64; 4]) -> f64 {
    if x >= x0 && x < x1 && y >= y0 && y < y1 {
        1.0
    } else {
        0.0
    }
}

pub struct Case {
    pub mesh: SpaceTimeMesh,
    pub bdata: BoundaryData,
}

impl Case {
    pub fn from_cells(nx: usize, nt: usize, ua: Vec<f64>, ub: Vec<f64>) -> Case {
        let mesh = SpaceTimeMesh::new(nx, nt, BoundaryCondition::Neumann).unwrap();
        let bdata = BoundaryData::from_cells(&mesh, &ua, &ub).unwrap();
        Case { mesh, bdata }
    }

    pub fn mass_a(&self) -> f64 {
        self.bdata.mass_a(&self.mesh)
    }

    pub fn mass_b(&self) -> f64 {
        self.bdata.mass_b(&self.mesh)
    }
}

pub const BLOB: [f64; 4] = [0.25, 0.5, 0.375, 0.625];
pub const SHIFT: f64 = 0.25;

/// Unit-intensity square blob translated by `(SHIFT, 0)`.
pub fn translation(nx: usize, nt: usize) -> Case {
    let [x0, x1, y0, y1] = BLOB;
    let ua = cell_field(nx, |x, y| boxed(x, y, BLOB));
    let ub = cell_field(nx, |x, y| boxed(x, y, [x0 + SHIFT, x1 + SHIFT, y0, y1]));
    Case::from_cells(nx, nt, ua, ub)
}

pub const LEFT: [f64; 4] = [0.125, 0.375, 0.375, 0.625];
pub const RIGHT: [f64; 4] = [0.625, 0.875, 0.375, 0.625];

/// Mass 2 on the left square spread over both squares at intensity 1.
pub fn two_squares(nx: usize, nt: usize) -> Case {
    let ua = cell_field(nx, |x, y| 2.0 * boxed(x, y, LEFT));
    let ub = cell_field(nx, |x, y| boxed(x, y, LEFT) + boxed(x, y, RIGHT));
    Case::from_cells(nx, nt, ua, ub)
}

pub const STRIP: [f64; 4] = [0.25, 0.75, 0.5 - 1.0 / 64.0, 0.5 + 1.0 / 64.0];

/// Thin strip with intensity 1 at `t = 0` and 2 at `t = 1`.
pub fn thin_strip(nx: usize, nt: usize) -> Case {
    let ua = cell_field(nx, |x, y| boxed(x, y, STRIP));
    let ub = cell_field(nx, |x, y| 2.0 * boxed(x, y, STRIP));
    Case::from_cells(nx, nt, ua, ub)
}

/// Positive sums of random Gaussian bumps; `balanced` rescales `ub` to the mass of `ua`.
pub fn smooth_random(nx: usize, nt: usize, seed: u64, balanced: bool) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bumps = || {
        let params: Vec<[f64; 4]> =
            (0..3).map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3), rng.gen_range(0.5..1.5)]).collect();
        cell_field(nx, move |x, y| {
            0.2 + params.iter().map(|[cx, cy, s, a]| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()).sum::<f64>()
        })
    };
    let ua = bumps();
    let mut ub = bumps();
    if balanced {
        let ratio = ua.iter().sum::<f64>() / ub.iter().sum::<f64>();
        ub.iter_mut().for_each(|v| *v *= ratio);
    }
    Case::from_cells(nx, nt, ua, ub)
}
