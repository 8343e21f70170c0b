//! Window partitioning with longitude-periodic shifts.
//!
//! Shifted windows roll the longitude axis cyclically (the grid genuinely
//! wraps there); latitude never rolls. When the window does not divide the
//! latitude extent, rows are zero-padded at the south edge and an attention
//! mask keeps real tokens from attending to padded keys.

use ndarray::{s, Array3, Array4};

use crate::error::{Error, Result};

/// Feature map carrier: [dim, lat', lon'].
pub type FeatureMap = Array3<f64>;

/// A batch of windows cut from one feature map, with enough geometry to
/// merge back exactly.
#[derive(Debug, Clone)]
pub struct Windows {
    /// [n_windows, window*window, dim]
    pub data: Array3<f64>,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    /// Zero rows appended to the latitude axis before partitioning.
    pub pad: usize,
}

/// Validate window geometry against a [dim, H, W] map.
pub fn check_window(h: usize, w: usize, window: usize, shift: usize) -> Result<usize> {
    if window == 0 {
        return Err(Error::config("window size must be positive"));
    }
    if window > w || window > h + window {
        return Err(Error::config(format!(
            "window {window} exceeds spatial dims {h}x{w}"
        )));
    }
    if w % window != 0 {
        return Err(Error::config(format!(
            "window {window} must divide the longitude extent {w}"
        )));
    }
    if shift != 0 && shift != window / 2 {
        return Err(Error::config("shift must be 0 or window/2"));
    }
    Ok(padded_rows(h, window))
}

/// Latitude extent after zero padding to a multiple of the window.
pub fn padded_rows(h: usize, window: usize) -> usize {
    h.div_ceil(window) * window
}

/// Cut a [dim, H, W] map into shifted windows.
pub fn window_partition(f: &FeatureMap, window: usize, shift: usize) -> Result<Windows> {
    let (c, h, w) = f.dim();
    let hp = check_window(h, w, window, shift)?;
    let (nh, nw) = (hp / window, w / window);
    let mut data = Array3::<f64>::zeros((nh * nw, window * window, c));
    for wi in 0..nh {
        for wj in 0..nw {
            for dy in 0..window {
                let row = wi * window + dy;
                for dx in 0..window {
                    // cyclic longitude shift: window column col reads source
                    // column (col + shift) mod w
                    let col = (wj * window + dx + shift) % w;
                    if row < h {
                        for ch in 0..c {
                            data[[wi * nw + wj, dy * window + dx, ch]] = f[[ch, row, col]];
                        }
                    }
                }
            }
        }
    }
    Ok(Windows { data, h, w, window, shift, pad: hp - h })
}

/// Exact inverse of [`window_partition`].
pub fn window_merge(wins: &Windows) -> Result<FeatureMap> {
    let (nwins, n, c) = wins.data.dim();
    let (h, w, window, shift) = (wins.h, wins.w, wins.window, wins.shift);
    let hp = padded_rows(h, window);
    let (nh, nw) = (hp / window, w / window);
    if nwins != nh * nw || n != window * window {
        return Err(Error::shape("window batch inconsistent with geometry"));
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for wi in 0..nh {
        for wj in 0..nw {
            for dy in 0..window {
                let row = wi * window + dy;
                if row >= h {
                    continue;
                }
                for dx in 0..window {
                    let col = (wj * window + dx + shift) % w;
                    for ch in 0..c {
                        out[[ch, row, col]] = wins.data[[wi * nw + wj, dy * window + dx, ch]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Additive attention mask [n_windows, 1, N, N] blocking padded-latitude
/// keys, or `None` when the window divides the latitude extent.
pub fn lat_pad_mask(h: usize, w: usize, window: usize) -> Option<Array4<f64>> {
    let hp = padded_rows(h, window);
    if hp == h {
        return None;
    }
    let (nh, nw) = (hp / window, w / window);
    let n = window * window;
    let mut mask = Array4::<f64>::zeros((nh * nw, 1, n, n));
    for wi in 0..nh {
        for wj in 0..nw {
            for db in 0..window {
                let key_row = wi * window + db;
                if key_row < h {
                    continue;
                }
                // key tokens on padded rows are unreachable
                for dxb in 0..window {
                    let b = db * window + dxb;
                    mask.slice_mut(s![wi * nw + wj, 0, .., b]).fill(-1e9);
                }
            }
        }
    }
    Some(mask)
}

/// Relative-position bias lookup indices for an `window`x`window` token
/// grid: N*N entries into a (2*window-1)^2-row table.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        let (ya, xa) = (a / window, a % window);
        for b in 0..n {
            let (yb, xb) = (b / window, b % window);
            let dy = ya as isize - yb as isize + window as isize - 1;
            let dx = xa as isize - xb as isize + window as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}
