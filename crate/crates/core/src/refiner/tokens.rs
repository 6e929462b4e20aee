use super::ClickSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{voxel_index, Dims};

/// Flattened feature rows plus the positional table, row for row.
pub fn tokenize(features: &Tensor, pe: &Tensor) -> Result<Tensor> {
    if features.shape() != pe.shape() {
        return Err(Error::shape("tokenize (positional table)", features.shape(), pe.shape()));
    }
    let data = features.data().iter().zip(pe.data()).map(|(f, p)| f + p).collect();
    Tensor::new(features.shape().to_vec(), data)
}

/// Token rows addressed by each click: the half-resolution cell
/// `floor(p / 2)` of a full-resolution click position `p`.
pub fn click_cells(half: Dims, clicks: &ClickSet) -> Result<Vec<usize>> {
    if clicks.is_empty() {
        return Err(Error::Contract("click indexing needs at least one click".into()));
    }
    let full = half.map(|e| 2 * e);
    clicks
        .iter()
        .map(|c| {
            if c.position.iter().zip(full).any(|(&p, e)| p >= e) {
                return Err(Error::Position {
                    position: c.position,
                    extents: full,
                });
            }
            Ok(voxel_index(half, c.position.map(|p| p / 2)))
        })
        .collect()
}

/// Picks one feature row per click from a half-resolution grid.
pub fn index_clicks(features: &Tensor, half: Dims, clicks: &ClickSet) -> Result<Tensor> {
    let rows = click_cells(half, clicks)?;
    if features.rows() != half.iter().product::<usize>() {
        return Err(Error::shape("index_clicks", features.shape(), &half));
    }
    let m = features.cols();
    let data = rows.iter().flat_map(|&r| features.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), m], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::Click;

    #[test]
    fn zero_pe_and_zero_features() {
        let f = Tensor::from_fn(&[8, 3], |i| i as f64 * 0.5);
        let zero = Tensor::zeros(&[8, 3]);
        assert_eq!(tokenize(&f, &zero).unwrap(), f);
        assert_eq!(tokenize(&zero, &f).unwrap(), f);
        assert!(matches!(tokenize(&f, &Tensor::zeros(&[4, 3])), Err(Error::Shape { .. })));
    }

    #[test]
    fn row_order_on_2x2x2_grid() {
        let half = [2, 2, 2];
        // encode the coordinate into the feature row
        let f = Tensor::from_fn(&[8, 3], |i| {
            let (row, ch) = (i / 3, i % 3);
            let coord = [row % 2, (row / 2) % 2, row / 4];
            coord[ch] as f64
        });
        let t = tokenize(&f, &Tensor::zeros(&[8, 3])).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let row = x + 2 * y + 4 * z;
                    assert_eq!(t.row(row), &[x as f64, y as f64, z as f64]);
                    assert_eq!(voxel_index(half, [x, y, z]), row);
                }
            }
        }
    }

    #[test]
    fn sentinel_lookup() {
        let half = [4, 4, 4];
        let target = voxel_index(half, [1, 2, 3]);
        let f = Tensor::from_fn(&[64, 2], |i| if i / 2 == target { 99.0 } else { 0.0 });
        let clicks = ClickSet::new(vec![Click::new([2, 4, 6], 1)]);
        assert_eq!(index_clicks(&f, half, &clicks).unwrap().data(), &[99.0, 99.0]);
    }

    #[test]
    fn neighbouring_clicks_share_a_cell() {
        let half = [4, 4, 4];
        let f = Tensor::from_fn(&[64, 2], |i| i as f64);
        let clicks = ClickSet::new(vec![Click::new([0, 0, 0], 1), Click::new([1, 1, 1], 2)]);
        let v = index_clicks(&f, half, &clicks).unwrap();
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn errors() {
        let half = [4, 4, 4];
        let f = Tensor::zeros(&[64, 2]);
        assert!(matches!(index_clicks(&f, half, &ClickSet::default()), Err(Error::Contract(_))));
        let out = ClickSet::new(vec![Click::new([8, 0, 0], 1)]);
        assert!(matches!(index_clicks(&f, half, &out), Err(Error::Position { .. })));
    }
}
