use super::{GeometryError, PointCloud};

/// Dense row-major index matrix, one row of neighbor indices per query.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl IndexMatrix {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        debug_assert!(rows.iter().all(|r| r.len() == cols));
        let mut data = Vec::with_capacity(rows.len() * cols);
        let n = rows.len();
        for row in rows {
            data.extend(row);
        }
        Self { rows: n, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }
}

/// Exact k-nearest-neighbor indices of each query point in `reference`,
/// sorted by ascending Euclidean distance with ties broken by lowest index.
///
/// Desk-scale clouds keep an exhaustive scan with partial selection faster
/// and simpler than a spatial index, and make the tie-break order easy to
/// pin down exactly.
pub fn knn(
    reference: &PointCloud,
    queries: &PointCloud,
    k: usize,
) -> Result<IndexMatrix, GeometryError> {
    if k == 0 || k > reference.len() {
        return Err(GeometryError::KnnSize { k, size: reference.len() });
    }
    let mut rows = Vec::with_capacity(queries.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for q in queries.iter() {
        scratch.clear();
        scratch.extend(
            reference
                .iter()
                .enumerate()
                .map(|(j, r)| ((q - r).norm_squared(), j)),
        );
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, order);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(order);
        rows.push(scratch.iter().map(|&(_, j)| j).collect());
    }
    Ok(IndexMatrix::from_rows(rows))
}
