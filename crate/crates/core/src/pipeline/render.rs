//! Importance maps as images: grayscale PGM or a red overlay PPM.

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::netpbm::{to_byte, Netpbm};
use crate::tensor::Tensor;

/// Renders `map` at image resolution. With `image`, the result is a 50%
/// blend of the grayscale image (channel mean) and a red layer of strength W.
pub fn render_map(map: &ImportanceMap, image: Option<&Tensor>) -> Result<Netpbm> {
    let (h, w) = map.image_dims();
    let t = map.token_size();
    let (_, gw) = map.grid_dims();
    let weight = |p: usize| map.grid().data()[(p / w / t) * gw + (p % w) / t];
    match image {
        None => Netpbm::gray(w, h, (0..h * w).map(|p| to_byte(weight(p))).collect()),
        Some(img) => {
            let c = match *img.shape() {
                [c, ih, iw] if (ih, iw) == (h, w) => c,
                _ => {
                    return Err(Error::ShapeMismatch {
                        op: "render_map",
                        left: vec![h, w],
                        right: img.shape().to_vec(),
                    })
                }
            };
            let mut px = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                let gray = (0..c).map(|ch| img.data()[ch * h * w + p]).sum::<f64>() / c as f64;
                let wt = weight(p);
                px.extend([to_byte(0.5 * gray + 0.5 * wt), to_byte(0.5 * gray), to_byte(0.5 * gray)]);
            }
            Netpbm::rgb(w, h, px)
        }
    }
}
