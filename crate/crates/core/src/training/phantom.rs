//! Synthetic labelled head volumes: a brain ellipsoid with 31 small ellipsoidal
//! structures, one per non-background class, each with its own intensity level.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::Grid;
use crate::labels::LabelTable;
use crate::volume::{ConformedVolume, Geometry, LabelVolume, Volume, CONFORMED_DIMS, CONFORMED_SIDE};

/// Structures sit on a lattice of cubic cells of this side around the volume centre.
const CELL: usize = 22;
/// Lattice shape; 32 cells for 31 structures.
const LATTICE: [usize; 3] = [4, 4, 2];
const NOISE_SIGMA: f64 = 0.005;
const TISSUE_MEAN: f32 = 0.1;
/// Structures stay within this distance of the volume centre, so one centred 96³ patch holds all of them.
pub const STRUCTURE_REACH: usize = 45;

#[derive(Clone, Debug)]
pub struct Phantom {
    pub intensity: ConformedVolume,
    /// FreeSurfer IDs.
    pub labels: LabelVolume,
    /// Intensity mean per class index.
    pub class_means: Vec<f32>,
}

impl Phantom {
    pub fn class_labels(&self, table: &LabelTable) -> Grid<u8> {
        table.map_to_class_indices(&self.labels.data).expect("phantom only uses table ids")
    }

    /// Corner of the `size³` window centred in the volume.
    pub fn centre_offset(size: usize) -> [usize; 3] {
        [(CONFORMED_SIDE - size) / 2; 3]
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).map(|a| ((p[a] as f64 - self.centre[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn bbox(&self) -> ([usize; 3], [usize; 3]) {
        let lo = [0, 1, 2].map(|a| (self.centre[a] - self.radii[a]).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((self.centre[a] + self.radii[a]).ceil() as usize + 1).min(CONFORMED_SIDE));
        (lo, hi)
    }
}

/// `num_cases` phantoms from one RNG; each satisfies: every table class present with at
/// least 27 voxels, distinct intensity mean per class, a 160³ content crop.
pub fn make_phantom(rng: &mut impl Rng, num_cases: usize) -> Vec<Phantom> {
    let table = LabelTable::subcortical();
    (0..num_cases).map(|_| one_phantom(rng, &table)).collect()
}

fn one_phantom(rng: &mut impl Rng, table: &LabelTable) -> Phantom {
    let mid = (CONFORMED_SIDE / 2) as f64;
    let brain = Ellipsoid {
        centre: [0; 3].map(|_| mid + rng.gen_range(-2..=2) as f64),
        radii: [0; 3].map(|_| rng.gen_range(73.0..78.5)),
    };
    let classes = table.len();
    let mut means = vec![TISSUE_MEAN; classes];
    let mut levels: Vec<f32> = (0..classes - 1).map(|k| 0.15 + 0.8 * k as f32 / (classes - 2) as f32).collect();
    levels.shuffle(rng);
    means[1..].copy_from_slice(&levels);

    let mut cells: Vec<[usize; 3]> = Vec::new();
    for i in 0..LATTICE[0] {
        for j in 0..LATTICE[1] {
            for k in 0..LATTICE[2] {
                cells.push([i, j, k]);
            }
        }
    }
    cells.shuffle(rng);
    let half = CELL as f64 / 2.0;
    let structures: Vec<(u8, Ellipsoid)> = (1..classes)
        .zip(&cells)
        .map(|(class, cell)| {
            let radii = [0; 3].map(|_| rng.gen_range(4.5..8.5));
            let centre = [0, 1, 2].map(|a| {
                let cell_mid = brain.centre[a] + (cell[a] as f64 - (LATTICE[a] as f64 - 1.0) / 2.0) * CELL as f64;
                let slack = half - 1.0 - radii[a];
                cell_mid + rng.gen_range(-slack..=slack)
            });
            (class as u8, Ellipsoid { centre, radii })
        })
        .collect();

    let mut class_grid = Grid::<u8>::zeros(CONFORMED_DIMS);
    for (class, e) in &structures {
        let (lo, hi) = e.bbox();
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    if e.contains([i, j, k]) {
                        *class_grid.get_mut([i, j, k]) = *class;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let mut intensity = Grid::<f32>::zeros(CONFORMED_DIMS);
    let (lo, hi) = brain.bbox();
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                if brain.contains([i, j, k]) {
                    let m = means[*class_grid.get([i, j, k]) as usize] as f64;
                    *intensity.get_mut([i, j, k]) = (m + noise.sample(rng)).clamp(0.02, 1.0) as f32;
                }
            }
        }
    }
    let geometry = Geometry::ras_1mm([-mid; 3]);
    let ids = table.map_to_freesurfer(&class_grid).expect("class indices come from the table");
    Phantom {
        intensity: ConformedVolume::new(Volume { data: intensity, geometry })
            .expect("phantom is conformed by construction"),
        labels: Volume { data: ids, geometry },
        class_means: means,
    }
}
