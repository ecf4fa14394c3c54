//! Planted zone archetypes: per-zone transit accessibility and effect
//! multipliers with a known effectiveness ordering.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accessibility archetype of a 500 m grid zone. The planted program
/// effectiveness is ordered SubwayRich > BusRich > Sparse > Peripheral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Archetype {
    SubwayRich,
    BusRich,
    Sparse,
    Peripheral,
}

pub const ALL_ARCHETYPES: [Archetype; 4] =
    [Archetype::SubwayRich, Archetype::BusRich, Archetype::Sparse, Archetype::Peripheral];

impl Archetype {
    pub fn index(self) -> usize {
        match self {
            Archetype::SubwayRich => 0,
            Archetype::BusRich => 1,
            Archetype::Sparse => 2,
            Archetype::Peripheral => 3,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Archetype::SubwayRich => "subway_rich",
            Archetype::BusRich => "bus_rich",
            Archetype::Sparse => "sparse",
            Archetype::Peripheral => "peripheral",
        }
    }
}

impl FromStr for Archetype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_ARCHETYPES
            .iter()
            .copied()
            .find(|a| a.token() == s)
            .ok_or_else(|| Error::Validation(format!("unknown archetype token: {s:?}")))
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One zone of the study grid with its planted infrastructure densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSpec {
    pub zone_id: u32,
    pub row: u32,
    pub col: u32,
    pub subway_density: f64,
    pub bus_density: f64,
    pub road_density: f64,
    pub archetype: Archetype,
}

/// Density means per archetype: (subway, bus, road).
fn density_means(a: Archetype) -> (f64, f64, f64) {
    match a {
        Archetype::SubwayRich => (0.95, 0.50, 0.65),
        Archetype::BusRich => (0.30, 0.90, 0.70),
        Archetype::Sparse => (0.15, 0.35, 0.50),
        Archetype::Peripheral => (0.05, 0.15, 0.35),
    }
}

/// How archetypes are laid out over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeLayout {
    /// Seeded shuffle over all zones.
    Random,
    /// Contiguous row-major bands (spatially coherent structure).
    Banded,
}

impl Default for ArchetypeLayout {
    fn default() -> Self {
        ArchetypeLayout::Random
    }
}

/// Assign archetypes over an `n_zones` grid by the given weights (largest
/// remainder apportionment, then the requested layout) and draw densities
/// around archetype means.
pub fn plant_zone_archetypes<R: Rng>(
    rng: &mut R,
    grid_rows: u32,
    grid_cols: u32,
    weights: &[f64; 4],
    layout: ArchetypeLayout,
) -> Result<Vec<ZoneSpec>> {
    let n_zones = (grid_rows * grid_cols) as usize;
    if n_zones == 0 {
        return Err(Error::Config("grid must contain at least one zone".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::Config("archetype weights must be non-negative and sum to 1".into()));
    }

    // Largest-remainder apportionment of zone counts.
    let mut counts = [0usize; 4];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(4);
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let exact = w * n_zones as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders.iter().take(n_zones - assigned) {
        counts[*i] += 1;
    }

    let mut labels: Vec<Archetype> = Vec::with_capacity(n_zones);
    for (i, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(ALL_ARCHETYPES[i]).take(c));
    }
    if layout == ArchetypeLayout::Random {
        // Fisher-Yates with the caller's stream.
        for i in (1..labels.len()).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
    }

    let noise = Normal::new(0.0, 0.04).expect("valid normal");
    let mut zones = Vec::with_capacity(n_zones);
    for z in 0..n_zones {
        let archetype = labels[z];
        let (ms, mb, mr) = density_means(archetype);
        let clamp = |v: f64| v.clamp(0.01, 1.5);
        zones.push(ZoneSpec {
            zone_id: z as u32,
            row: z as u32 / grid_cols,
            col: z as u32 % grid_cols,
            subway_density: clamp(ms + noise.sample(rng)),
            bus_density: clamp(mb + noise.sample(rng)),
            road_density: clamp(mr + noise.sample(rng)),
            archetype,
        });
    }
    Ok(zones)
}

pub const ZONES_HEADER: [&str; 7] =
    ["zone_id", "row", "col", "subway_density", "bus_density", "road_density", "archetype"];

pub fn write_zones_csv(path: &Path, zones: &[ZoneSpec]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ZONES_HEADER)?;
    for z in zones {
        w.write_record(&[
            z.zone_id.to_string(),
            z.row.to_string(),
            z.col.to_string(),
            z.subway_density.to_string(),
            z.bus_density.to_string(),
            z.road_density.to_string(),
            z.archetype.token().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_zones_csv(path: &Path) -> Result<Vec<ZoneSpec>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let got: Vec<&str> = reader.headers()?.iter().collect();
    if got != ZONES_HEADER {
        return Err(Error::Validation(format!("malformed zones.csv header: {got:?}")));
    }
    let mut zones = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").trim();
        let parse_f = |i: usize| -> Result<f64> {
            get(i).parse().map_err(|_| Error::Validation(format!("bad zones.csv field {i}")))
        };
        zones.push(ZoneSpec {
            zone_id: get(0).parse().map_err(|_| Error::Validation("bad zone_id".into()))?,
            row: get(1).parse().map_err(|_| Error::Validation("bad row".into()))?,
            col: get(2).parse().map_err(|_| Error::Validation("bad col".into()))?,
            subway_density: parse_f(3)?,
            bus_density: parse_f(4)?,
            road_density: parse_f(5)?,
            archetype: get(6).parse()?,
        });
    }
    Ok(zones)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn allocation_matches_weights_up_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zones = plant_zone_archetypes(&mut rng, 10, 10, &[0.25, 0.25, 0.25, 0.25], ArchetypeLayout::Random).unwrap();
        assert_eq!(zones.len(), 100);
        for a in ALL_ARCHETYPES {
            let n = zones.iter().filter(|z| z.archetype == a).count();
            assert_eq!(n, 25);
        }
    }

    #[test]
    fn uneven_weights_round_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zones = plant_zone_archetypes(&mut rng, 3, 3, &[0.4, 0.3, 0.2, 0.1], ArchetypeLayout::Banded).unwrap();
        assert_eq!(zones.len(), 9);
        let total: usize = ALL_ARCHETYPES
            .iter()
            .map(|&a| zones.iter().filter(|z| z.archetype == a).count())
            .sum();
        assert_eq!(total, 9);
    }

    #[test]
    fn subway_density_orders_by_archetype() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zones = plant_zone_archetypes(&mut rng, 12, 12, &[0.25, 0.25, 0.25, 0.25], ArchetypeLayout::Random).unwrap();
        let mean = |a: Archetype| {
            let v: Vec<f64> = zones
                .iter()
                .filter(|z| z.archetype == a)
                .map(|z| z.subway_density)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(Archetype::SubwayRich) > mean(Archetype::BusRich));
        assert!(mean(Archetype::BusRich) > mean(Archetype::Sparse));
        assert!(mean(Archetype::Sparse) > mean(Archetype::Peripheral));
    }
}
