use serde::{Deserialize, Serialize};

/// Ground geometry in the vertical plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Terrain {
    /// No ground (swimmer).
    None,
    /// Flat ground at `z = 0`.
    Flat,
    /// Raised blocks of height `height` separated by periodic gaps that drop
    /// to `z = 0`. Gap `j` spans `[gap_start + j * period, gap_start + width + j * period)`.
    Gaps {
        height: f64,
        width: f64,
        period: f64,
        gap_start: f64,
    },
}

/// Penetration of a disc into the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub depth: f64,
    /// Unit outward normal of the ground surface.
    pub normal: [f64; 2],
}

impl Terrain {
    /// Surface height directly below `x` (top of the solid column).
    pub fn height_at(&self, x: f64) -> f64 {
        match *self {
            Terrain::None | Terrain::Flat => 0.0,
            Terrain::Gaps {
                height,
                width,
                period,
                gap_start,
            } => {
                let u = (x - gap_start).rem_euclid(period);
                if u < width {
                    0.0
                } else {
                    height
                }
            }
        }
    }

    /// Contact for a disc of radius `r` centred at `(x, z)`, if touching.
    pub fn contact(&self, x: f64, z: f64, r: f64) -> Option<Contact> {
        let (sd, normal) = match *self {
            Terrain::None => return None,
            Terrain::Flat => (z, [0.0, 1.0]),
            Terrain::Gaps {
                height,
                width,
                period,
                gap_start,
            } => {
                let mut best = (z, [0.0, 1.0]);
                // block j spans [gap_start + width + (j-1) P, gap_start + j P]
                let j0 = ((x - gap_start - width) / period).floor() as i64 + 1;
                for j in (j0 - 1)..=(j0 + 1) {
                    let a = gap_start + width + (j - 1) as f64 * period;
                    let b = gap_start + j as f64 * period;
                    let cand = block_sdf(x, z, a, b, height);
                    if cand.0 < best.0 {
                        best = cand;
                    }
                }
                best
            }
        };
        let depth = r - sd;
        (depth > 0.0).then_some(Contact { depth, normal })
    }
}

/// Signed distance to the region `a <= x <= b, z <= h`.
fn block_sdf(x: f64, z: f64, a: f64, b: f64, h: f64) -> (f64, [f64; 2]) {
    let dx_out = (a - x).max(x - b).max(0.0);
    let dz_out = (z - h).max(0.0);
    if dx_out == 0.0 && dz_out == 0.0 {
        let up = h - z;
        let left = x - a;
        let right = b - x;
        if up <= left && up <= right {
            (-up, [0.0, 1.0])
        } else if left <= right {
            (-left, [-1.0, 0.0])
        } else {
            (-right, [1.0, 0.0])
        }
    } else {
        let sx = if x < a { -dx_out } else { dx_out };
        let d = (dx_out * dx_out + dz_out * dz_out).sqrt();
        (d, [sx / d, dz_out / d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaps() -> Terrain {
        Terrain::Gaps {
            height: 0.5,
            width: 0.96,
            period: 3.2,
            gap_start: 1.6,
        }
    }

    #[test]
    fn gap_profile_is_periodic() {
        let t = gaps();
        assert_eq!(t.height_at(0.0), 0.5);
        assert_eq!(t.height_at(2.0), 0.0);
        assert_eq!(t.height_at(2.0 + 3.2), 0.0);
        assert_eq!(t.height_at(2.0 - 3.2), 0.0);
        assert_eq!(t.height_at(2.6), 0.5);
    }

    #[test]
    fn contact_on_block_top() {
        let c = gaps().contact(0.0, 0.45, 0.1).unwrap();
        assert!((c.depth - 0.15).abs() < 1e-12);
        assert_eq!(c.normal, [0.0, 1.0]);
        assert!(gaps().contact(2.0, 0.45, 0.1).is_none());
    }

    #[test]
    fn contact_on_gap_wall() {
        // just inside the gap, level with the block's side
        let c = gaps().contact(1.65, 0.3, 0.1).unwrap();
        assert!((c.depth - 0.05).abs() < 1e-12);
        assert_eq!(c.normal, [1.0, 0.0]);
    }
}
