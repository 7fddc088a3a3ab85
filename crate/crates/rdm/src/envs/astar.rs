use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

use super::world::MazeWorld;

/// A* over 4-connected passable cells with unit costs and a Manhattan
/// heuristic. Equal-cost frontier entries pop in (row, col) lexicographic
/// order, so paths are deterministic. Doors count as passable.
pub fn expert_path(
    world: &MazeWorld,
    start: (usize, usize),
    goal: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    if !world.passable_cell(start.0, start.1) || !world.passable_cell(goal.0, goal.1) {
        return Err(Error::NoPath {
            from: start,
            to: goal,
        });
    }
    if start == goal {
        return Ok(vec![start]);
    }
    let w = world.width();
    let h = world.height();
    let idx = |cell: (usize, usize)| cell.0 * w + cell.1;
    let manhattan = |a: (usize, usize), b: (usize, usize)| {
        (a.0.abs_diff(b.0) + a.1.abs_diff(b.1)) as u32
    };

    let mut g = vec![u32::MAX; w * h];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; w * h];
    let mut heap: BinaryHeap<Reverse<(u32, (usize, usize))>> = BinaryHeap::new();
    g[idx(start)] = 0;
    heap.push(Reverse((manhattan(start, goal), start)));

    while let Some(Reverse((_f, cell))) = heap.pop() {
        if cell == goal {
            let mut path = vec![goal];
            let mut cur = goal;
            while let Some(p) = parent[idx(cur)] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Ok(path);
        }
        let (r, c) = cell;
        let gc = g[idx(cell)];
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for nb in neighbors {
            if !world.passable_cell(nb.0, nb.1) {
                continue;
            }
            let ng = gc + 1;
            if ng < g[idx(nb)] {
                g[idx(nb)] = ng;
                parent[idx(nb)] = Some(cell);
                heap.push(Reverse((ng + manhattan(nb, goal), nb)));
            }
        }
    }
    Err(Error::NoPath {
        from: start,
        to: goal,
    })
}

/// Cell path mapped to world-coordinate waypoints at cell centers.
pub fn waypoints(world: &MazeWorld, path: &[(usize, usize)]) -> Vec<[f32; 2]> {
    path.iter().map(|&cell| world.cell_center(cell)).collect()
}
