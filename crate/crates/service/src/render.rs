//! Slice rasterization for the viewer: window/level to 8-bit and packed
//! mask bitmaps.

use voxprompt_core::volume::slice_indices;
use voxprompt_core::{MaskVolume, Volume};

/// 8-bit grayscale slice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GraySlice {
    pub width: usize,
    pub height: usize,
    pub center: f64,
    pub width_window: f64,
    pub pixels: Vec<u8>,
}

/// Full intensity range as (center, width).
pub fn default_window(volume: &Volume) -> (f64, f64) {
    let (lo, hi) = volume.range();
    ((lo + hi) / 2.0, hi - lo)
}

/// Linear window/level mapping. A non-positive width thresholds at the
/// center.
pub fn window_level(value: f64, center: f64, width: f64) -> u8 {
    if width <= 0.0 {
        return if value > center { 255 } else { 0 };
    }
    let t = (value - (center - width / 2.0)) / width;
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn gray_slice(
    volume: &Volume,
    axis: usize,
    index: usize,
    center: Option<f64>,
    width: Option<f64>,
) -> Option<GraySlice> {
    let (w, h, idx) = slice_indices(volume.dims(), axis, index)?;
    let (dc, dw) = default_window(volume);
    let center = center.unwrap_or(dc);
    let width_window = width.unwrap_or(dw);
    let pixels = idx
        .into_iter()
        .map(|i| window_level(volume.get_linear(i), center, width_window))
        .collect();
    Some(GraySlice {
        width: w,
        height: h,
        center,
        width_window,
        pixels,
    })
}

/// One bit per pixel, row-major, least significant bit first.
pub fn pack_bits(bits: impl IntoIterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    for (n, b) in bits.into_iter().enumerate() {
        if n % 8 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().unwrap() |= 1 << (n % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|n| bytes[n / 8] >> (n % 8) & 1 == 1).collect()
}

pub fn mask_slice(mask: &MaskVolume, axis: usize, index: usize) -> Option<Vec<u8>> {
    let (_, _, idx) = slice_indices(mask.dims, axis, index)?;
    Some(pack_bits(idx.into_iter().map(|i| mask.values[i] != 0)))
}
