//! Map layouts: a bordered grid with a few interior walls, a fixed start
//! pose and colored target objects at fixed cells. Layouts never change
//! across trials; rarity rank equals object index.

use crate::error::EnvError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: usize,
    pub color: [u8; 3],
    pub cell: (usize, usize), // (row, col)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub map_id: usize,
    pub height: usize,
    pub width: usize,
    walls: Vec<bool>,
    pub objects: Vec<ObjectSpec>,
    pub start: (usize, usize),
    /// 0 = north (-row), 1 = east (+col), 2 = south, 3 = west.
    pub start_facing: u8,
}

impl MapSpec {
    /// Build a map from explicit parts, enforcing the layout invariants:
    /// distinct object cells, everything on floor, and every object
    /// reachable from the start with the other objects in the way.
    pub fn from_parts(
        map_id: usize,
        height: usize,
        width: usize,
        walls: Vec<bool>,
        objects: Vec<ObjectSpec>,
        start: (usize, usize),
        start_facing: u8,
    ) -> Result<Self, EnvError> {
        if walls.len() != height * width {
            return Err(EnvError::InvalidArgument(format!(
                "walls vector has {} cells, expected {}",
                walls.len(),
                height * width
            )));
        }
        let spec = MapSpec {
            map_id,
            height,
            width,
            walls,
            objects,
            start,
            start_facing: start_facing % 4,
        };
        if spec.is_wall(start.0 as isize, start.1 as isize) {
            return Err(EnvError::InvalidArgument("start must be on floor".into()));
        }
        let mut cells: Vec<_> = spec.objects.iter().map(|o| o.cell).collect();
        cells.sort_unstable();
        cells.dedup();
        if cells.len() != spec.objects.len() {
            return Err(EnvError::InvalidArgument("object cells must be distinct".into()));
        }
        for o in &spec.objects {
            if spec.is_wall(o.cell.0 as isize, o.cell.1 as isize) || o.cell == start {
                return Err(EnvError::InvalidArgument(format!(
                    "object {} must sit on free floor",
                    o.id
                )));
            }
            let blocked: Vec<_> = spec
                .objects
                .iter()
                .filter(|x| x.id != o.id)
                .map(|x| x.cell)
                .collect();
            let seen = reachable_cells(&spec, &blocked, start);
            if !seen[o.cell.0 * width + o.cell.1] {
                return Err(EnvError::InvalidArgument(format!(
                    "object {} unreachable from start",
                    o.id
                )));
            }
        }
        Ok(spec)
    }

    pub fn is_wall(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            return true;
        }
        self.walls[row as usize * self.width + col as usize]
    }

    pub fn object_at(&self, cell: (usize, usize)) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn object(&self, id: usize) -> Option<&ObjectSpec> {
        self.objects.get(id).filter(|o| o.id == id)
    }

    /// Plain-text dump: `#` wall, `.` floor, digits (then letters) for
    /// objects, `S` start, followed by a color table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let ch = if let Some(o) = self.object_at((r, c)) {
                    object_char(o.id)
                } else if (r, c) == self.start {
                    'S'
                } else if self.walls[r * self.width + c] {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out.push_str("colors:\n");
        for o in &self.objects {
            out.push_str(&format!(
                "{} {} {} {}\n",
                o.id, o.color[0], o.color[1], o.color[2]
            ));
        }
        out
    }
}

fn object_char(id: usize) -> char {
    if id < 10 {
        (b'0' + id as u8) as char
    } else {
        (b'a' + (id - 10) as u8 % 26) as char
    }
}

/// Fixed palette by object index: evenly spaced hues, full saturation.
/// The same index maps to the same color in every map, so the target
/// patch color identifies the object rank globally.
pub fn object_color(id: usize, n_objects: usize) -> [u8; 3] {
    let hue = 360.0 * id as f64 / n_objects.max(1) as f64;
    hsv_to_rgb(hue, 0.85, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Cells reachable from `from`, walking floor cells only. Cells listed in
/// `blocked` are treated as walls (other objects block paths).
pub fn reachable_cells(map: &MapSpec, blocked: &[(usize, usize)], from: (usize, usize)) -> Vec<bool> {
    let mut seen = vec![false; map.height * map.width];
    let idx = |r: usize, c: usize| r * map.width + c;
    let mut queue = std::collections::VecDeque::new();
    seen[idx(from.0, from.1)] = true;
    queue.push_back(from);
    while let Some((r, c)) = queue.pop_front() {
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if map.is_wall(nr, nc) {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if seen[idx(nr, nc)] || blocked.contains(&(nr, nc)) {
                continue;
            }
            seen[idx(nr, nc)] = true;
            queue.push_back((nr, nc));
        }
    }
    seen
}

const GENERATION_ATTEMPTS: usize = 500;

/// Deterministic in (seed, map_id, dims, n_objects): each map draws from
/// its own derived stream, so map k is stable regardless of n_maps.
pub fn generate_maps(
    seed: u64,
    n_maps: usize,
    n_objects: usize,
    dims: (usize, usize),
) -> Result<Vec<MapSpec>, EnvError> {
    (0..n_maps)
        .map(|map_id| generate_map(seed, map_id, n_objects, dims))
        .collect()
}

fn generate_map(
    seed: u64,
    map_id: usize,
    n_objects: usize,
    (height, width): (usize, usize),
) -> Result<MapSpec, EnvError> {
    if height < 3 || width < 3 {
        return Err(EnvError::Generation(format!(
            "grid {height}x{width} too small for a bordered map"
        )));
    }
    let interior = (height - 2) * (width - 2);
    if n_objects + 1 > interior {
        return Err(EnvError::Generation(format!(
            "cannot place {n_objects} objects plus a start on {interior} interior cells"
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (map_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n_interior_walls = interior / 12;

    for _ in 0..GENERATION_ATTEMPTS {
        let mut walls = vec![false; height * width];
        for c in 0..width {
            walls[c] = true;
            walls[(height - 1) * width + c] = true;
        }
        for r in 0..height {
            walls[r * width] = true;
            walls[r * width + width - 1] = true;
        }
        for _ in 0..n_interior_walls {
            let r = rng.random_range(1..height - 1);
            let c = rng.random_range(1..width - 1);
            walls[r * width + c] = true;
        }

        let floor: Vec<(usize, usize)> = (1..height - 1)
            .flat_map(|r| (1..width - 1).map(move |c| (r, c)))
            .filter(|&(r, c)| !walls[r * width + c])
            .collect();
        if floor.len() < n_objects + 1 {
            continue;
        }

        // Distinct cells for the start plus every object.
        let mut picks: Vec<(usize, usize)> = Vec::with_capacity(n_objects + 1);
        let mut pool = floor.clone();
        for _ in 0..n_objects + 1 {
            let i = rng.random_range(0..pool.len());
            picks.push(pool.swap_remove(i));
        }
        let start = picks[0];
        let object_cells = &picks[1..];

        let candidate = MapSpec {
            map_id,
            height,
            width,
            walls,
            objects: object_cells
                .iter()
                .enumerate()
                .map(|(id, &cell)| ObjectSpec {
                    id,
                    color: object_color(id, n_objects),
                    cell,
                })
                .collect(),
            start,
            start_facing: rng.random_range(0..4) as u8,
        };

        // Every object must be reachable from the start while the other
        // objects block the way.
        let ok = candidate.objects.iter().all(|obj| {
            let blocked: Vec<(usize, usize)> = candidate
                .objects
                .iter()
                .filter(|o| o.id != obj.id)
                .map(|o| o.cell)
                .collect();
            let seen = reachable_cells(&candidate, &blocked, start);
            seen[obj.cell.0 * width + obj.cell.1]
        });
        if ok {
            return Ok(candidate);
        }
    }
    Err(EnvError::Generation(format!(
        "no feasible layout for map {map_id} after {GENERATION_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_maps(42, 3, 5, (11, 11)).unwrap();
        let b = generate_maps(42, 3, 5, (11, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_maps(43, 3, 5, (11, 11)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ten_objects_on_open_grid_all_reachable() {
        let maps = generate_maps(7, 2, 10, (11, 11)).unwrap();
        for m in &maps {
            assert_eq!(m.objects.len(), 10);
            let mut cells: Vec<_> = m.objects.iter().map(|o| o.cell).collect();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), 10, "object cells must be distinct");
            for obj in &m.objects {
                let blocked: Vec<_> = m
                    .objects
                    .iter()
                    .filter(|o| o.id != obj.id)
                    .map(|o| o.cell)
                    .collect();
                let seen = reachable_cells(m, &blocked, m.start);
                assert!(seen[obj.cell.0 * m.width + obj.cell.1]);
            }
        }
    }

    #[test]
    fn too_many_objects_is_a_generation_error() {
        // 3x3 bordered grid has a single interior cell.
        assert!(generate_maps(1, 1, 2, (3, 3)).is_err());
    }

    #[test]
    fn colors_distinct_within_map() {
        let maps = generate_maps(9, 1, 8, (11, 11)).unwrap();
        let mut colors: Vec<_> = maps[0].objects.iter().map(|o| o.color).collect();
        colors.sort_unstable();
        colors.dedup();
        assert_eq!(colors.len(), 8);
    }

    #[test]
    fn text_dump_round_trips_visually() {
        let maps = generate_maps(5, 1, 3, (7, 9)).unwrap();
        let text = maps[0].to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].len(), 9);
        assert!(lines[0].chars().all(|c| c == '#'));
        assert!(text.contains('S'));
        assert!(text.contains('0'));
        assert!(text.contains("colors:"));
    }
}
