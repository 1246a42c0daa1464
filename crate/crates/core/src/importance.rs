//! Token importance maps and their `KCW1` file format.
//!
//! ```text
//! "KCW1" | u32 H | u32 W | u32 token_size | u32 H_t | u32 W_t
//!        | u32 len, image_id bytes | u32 len, oracle_id bytes
//!        | H_t·W_t little-endian f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::Reader;
use crate::tensor::Tensor;

pub const MAP_MAGIC: &[u8; 4] = b"KCW1";

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    grid: Tensor,
    token_size: usize,
    source_image_id: String,
    oracle_id: String,
}

impl ImportanceMap {
    /// Wraps an `H_t×W_t` grid of scores in `[0, 1]`.
    pub fn new(
        grid: Tensor,
        token_size: usize,
        source_image_id: impl Into<String>,
        oracle_id: impl Into<String>,
    ) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::invalid("ImportanceMap", format!("grid must be H_t×W_t, got {:?}", grid.shape())));
        }
        if token_size == 0 {
            return Err(Error::invalid("ImportanceMap", "token size must be positive"));
        }
        if let Some(v) = grid.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("ImportanceMap", format!("score {v} outside [0, 1]")));
        }
        Ok(ImportanceMap {
            grid,
            token_size,
            source_image_id: source_image_id.into(),
            oracle_id: oracle_id.into(),
        })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn token_size(&self) -> usize {
        self.token_size
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let (h, w) = self.grid_dims();
        (h * self.token_size, w * self.token_size)
    }

    pub fn source_image_id(&self) -> &str {
        &self.source_image_id
    }

    pub fn oracle_id(&self) -> &str {
        &self.oracle_id
    }

    /// Row-major index of the highest score; earliest index wins ties.
    pub fn argmax(&self) -> usize {
        let d = self.grid.data();
        (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (ht, wt) = self.grid_dims();
        let (h, w) = self.image_dims();
        let mut out = Vec::new();
        out.extend_from_slice(MAP_MAGIC);
        for v in [h, w, self.token_size, ht, wt] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in [&self.source_image_id, &self.oracle_id] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for v in self.grid.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const F: &str = "KCW1";
        let mut r = Reader::new(bytes, 0, F);
        r.magic(MAP_MAGIC)?;
        let dims_at = r.offset();
        let h = r.u32("image height")? as usize;
        let w = r.u32("image width")? as usize;
        let t = r.u32("token size")? as usize;
        let ht = r.u32("grid height")? as usize;
        let wt = r.u32("grid width")? as usize;
        if t == 0 || ht == 0 || wt == 0 || ht * t != h || wt * t != w {
            return Err(Error::format(
                F,
                dims_at,
                format!("grid {ht}×{wt} with token {t} does not tile a {h}×{w} image"),
            ));
        }
        let image_id = r.string("image id")?;
        let oracle_id = r.string("oracle id")?;
        let scores_at = r.offset();
        let scores = r.f64s(ht * wt, "scores")?;
        r.finish()?;
        let grid = Tensor::from_parts(vec![ht, wt], scores);
        ImportanceMap::new(grid, t, image_id, oracle_id).map_err(|e| Error::format(F, scores_at, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
