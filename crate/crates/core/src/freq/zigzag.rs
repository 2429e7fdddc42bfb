//! The standard JPEG zigzag traversal of the 8x8 frequency grid.

/// Bijection between zigzag rank 0..64 and (row, col) frequency positions.
#[derive(Debug, Clone)]
pub struct ZigzagPerm {
    /// rank -> (row, col)
    rank_to_pos: [(u8, u8); 64],
    /// row*8+col -> rank
    pos_to_rank: [u8; 64],
}

impl ZigzagPerm {
    pub fn position(&self, rank: usize) -> (usize, usize) {
        let (r, c) = self.rank_to_pos[rank];
        (r as usize, c as usize)
    }

    pub fn rank(&self, row: usize, col: usize) -> usize {
        self.pos_to_rank[row * 8 + col] as usize
    }

    /// rank -> flat natural-order index (row*8+col), the layout used on
    /// the JPEG wire.
    pub fn natural_index(&self, rank: usize) -> usize {
        let (r, c) = self.rank_to_pos[rank];
        r as usize * 8 + c as usize
    }
}

/// Builds the traversal by walking anti-diagonals, alternating direction,
/// starting upward-right from (0,0).
pub fn zigzag_order() -> &'static ZigzagPerm {
    static PERM: std::sync::OnceLock<ZigzagPerm> = std::sync::OnceLock::new();
    PERM.get_or_init(|| {
        let mut rank_to_pos = [(0u8, 0u8); 64];
        let mut pos_to_rank = [0u8; 64];
        let mut rank = 0usize;
        for diag in 0..15 {
            // cells with row+col == diag
            let cells: Vec<(usize, usize)> = (0..8)
                .filter_map(|r| {
                    let c = diag as isize - r as isize;
                    (0..8).contains(&c).then_some((r, c as usize))
                })
                .collect();
            let upward = diag % 2 == 0; // even diagonals run toward decreasing row
            let iter: Box<dyn Iterator<Item = &(usize, usize)>> =
                if upward { Box::new(cells.iter().rev()) } else { Box::new(cells.iter()) };
            for &(r, c) in iter {
                rank_to_pos[rank] = (r as u8, c as u8);
                pos_to_rank[r * 8 + c] = rank as u8;
                rank += 1;
            }
        }
        debug_assert_eq!(rank, 64);
        ZigzagPerm { rank_to_pos, pos_to_rank }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ITU T.81 Figure A.6 zigzag table, natural index by rank.
    const T81_ZIGZAG: [usize; 64] = [
        0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34,
        27, 20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44,
        51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
    ];

    #[test]
    fn matches_t81_table() {
        let z = zigzag_order();
        for (rank, &nat) in T81_ZIGZAG.iter().enumerate() {
            assert_eq!(z.natural_index(rank), nat, "rank {rank}");
        }
    }

    #[test]
    fn endpoints_and_first_six() {
        let z = zigzag_order();
        assert_eq!(z.position(0), (0, 0));
        assert_eq!(z.position(63), (7, 7));
        let first: Vec<(usize, usize)> = (0..6).map(|r| z.position(r)).collect();
        assert_eq!(first, [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
    }

    #[test]
    fn is_a_bijection() {
        let z = zigzag_order();
        let mut seen = [false; 64];
        for rank in 0..64 {
            let (r, c) = z.position(rank);
            assert!(!seen[r * 8 + c]);
            seen[r * 8 + c] = true;
            assert_eq!(z.rank(r, c), rank);
        }
        assert!(seen.iter().all(|&s| s));
    }
}
