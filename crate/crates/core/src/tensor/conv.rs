//! Convolution kernels on [channel, lat, lon] arrays.
//!
//! All spatial padding follows the sphere's topology at desk scale:
//! longitude wraps periodically, latitude is zero-padded. Convolutions are
//! evaluated as im2col + GEMM; backward passes recompute the column matrix
//! rather than caching it.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

/// Geometry of a 2-D convolution over a [C, H, W] map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    /// Zero padding on both latitude edges.
    pub pad_h: usize,
    /// Periodic padding on both longitude edges.
    pub pad_w: usize,
}

impl Conv2dCfg {
    /// kxk kernel, stride 1, "same" output size on even grids.
    pub fn same(k: usize) -> Self {
        assert!(k % 2 == 1, "same-padding requires odd kernel");
        Conv2dCfg { kh: k, kw: k, sh: 1, sw: 1, pad_h: k / 2, pad_w: k / 2 }
    }

    /// 2x2 kernel stride 2: exact halving of even spatial dims, no padding.
    pub fn halving() -> Self {
        Conv2dCfg { kh: 2, kw: 2, sh: 2, sw: 2, pad_h: 0, pad_w: 0 }
    }

    /// kxk kernel, stride 2, halving output on even grids.
    pub fn down(k: usize) -> Self {
        assert!(k % 2 == 1);
        Conv2dCfg { kh: k, kw: k, sh: 2, sw: 2, pad_h: k / 2, pad_w: k / 2 }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let hp = h + 2 * self.pad_h;
        let wp = w + 2 * self.pad_w;
        assert!(hp >= self.kh && wp >= self.kw, "kernel larger than padded input");
        ((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1)
    }
}

/// Pad [C, H, W] with zero rows in latitude and wrapped columns in longitude.
pub fn pad_lat_lon(x: &ArrayView3<f64>, ph: usize, pw: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h + 2 * ph, w + 2 * pw));
    out.slice_mut(s![.., ph..ph + h, pw..pw + w]).assign(x);
    if pw > 0 {
        assert!(pw <= w, "periodic pad wider than the grid");
        for j in 0..pw {
            // left pad column j mirrors source column w - pw + j
            let src_left = x.slice(s![.., .., w - pw + j]);
            out.slice_mut(s![.., ph..ph + h, j]).assign(&src_left);
            let src_right = x.slice(s![.., .., j]);
            out.slice_mut(s![.., ph..ph + h, w + pw + j]).assign(&src_right);
        }
    }
    out
}

/// Adjoint of [`pad_lat_lon`]: crop latitude, fold wrapped longitude columns
/// back onto their sources.
pub fn unpad_grad(g: &Array3<f64>, h: usize, w: usize, ph: usize, pw: usize) -> Array3<f64> {
    let c = g.dim().0;
    let mut out = Array3::<f64>::zeros((c, h, w));
    out.assign(&g.slice(s![.., ph..ph + h, pw..pw + w]));
    if pw > 0 {
        for j in 0..pw {
            let left = g.slice(s![.., ph..ph + h, j]).to_owned();
            let mut dst = out.slice_mut(s![.., .., w - pw + j]);
            dst += &left;
            let right = g.slice(s![.., ph..ph + h, w + pw + j]).to_owned();
            let mut dst = out.slice_mut(s![.., .., j]);
            dst += &right;
        }
    }
    out
}

fn im2col(xp: &Array3<f64>, cfg: &Conv2dCfg, ho: usize, wo: usize) -> Array2<f64> {
    let (c, _, _) = xp.dim();
    let mut cols = Array2::<f64>::zeros((c * cfg.kh * cfg.kw, ho * wo));
    for ch in 0..c {
        for dy in 0..cfg.kh {
            for dx in 0..cfg.kw {
                let row = (ch * cfg.kh + dy) * cfg.kw + dx;
                for oy in 0..ho {
                    let iy = oy * cfg.sh + dy;
                    for ox in 0..wo {
                        cols[[row, oy * wo + ox]] = xp[[ch, iy, ox * cfg.sw + dx]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &Array2<f64>, c: usize, hp: usize, wp: usize, cfg: &Conv2dCfg, ho: usize, wo: usize) -> Array3<f64> {
    let mut gx = Array3::<f64>::zeros((c, hp, wp));
    for ch in 0..c {
        for dy in 0..cfg.kh {
            for dx in 0..cfg.kw {
                let row = (ch * cfg.kh + dy) * cfg.kw + dx;
                for oy in 0..ho {
                    let iy = oy * cfg.sh + dy;
                    for ox in 0..wo {
                        gx[[ch, iy, ox * cfg.sw + dx]] += gcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    gx
}

/// Forward convolution. `x` is [Cin, H, W], `w` is [Cout, Cin, kh, kw].
pub fn conv2d_fwd(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    cfg: &Conv2dCfg,
) -> Array3<f64> {
    let (cin, h, wdt) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!((kh, kw), (cfg.kh, cfg.kw));
    let (ho, wo) = cfg.out_dims(h, wdt);
    let xp = pad_lat_lon(x, cfg.pad_h, cfg.pad_w);
    let cols = im2col(&xp, cfg, ho, wo);
    let w2 = w.to_shape((cout, cin * kh * kw)).unwrap();
    let mut out2 = w2.dot(&cols); // [Cout, Ho*Wo]
    if let Some(bias) = b {
        for (mut row, bv) in out2.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += *bv;
        }
    }
    out2.into_shape((cout, ho, wo)).unwrap()
}

/// Backward convolution. Returns (grad x, grad w, grad bias).
pub fn conv2d_bwd(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    cfg: &Conv2dCfg,
    gout: &ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cin, h, wdt) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (ho, wo) = cfg.out_dims(h, wdt);
    let xp = pad_lat_lon(x, cfg.pad_h, cfg.pad_w);
    let cols = im2col(&xp, cfg, ho, wo);
    let g2 = gout.to_shape((cout, ho * wo)).unwrap();

    let gb = g2.sum_axis(Axis(1));
    let gw2 = g2.dot(&cols.t()); // [Cout, Cin*kh*kw]
    let gw = gw2.into_shape((cout, cin, kh, kw)).unwrap();

    let w2 = w.to_shape((cout, cin * kh * kw)).unwrap();
    let gcols = w2.t().dot(&g2); // [Cin*kh*kw, Ho*Wo]
    let (hp, wp) = (h + 2 * cfg.pad_h, wdt + 2 * cfg.pad_w);
    let gxp = col2im(&gcols, cin, hp, wp, cfg, ho, wo);
    let gx = unpad_grad(&gxp, h, wdt, cfg.pad_h, cfg.pad_w);
    (gx, gw, gb)
}

/// Transposed convolution with kernel == stride (non-overlapping upsampling).
/// `x` is [Cin, H, W], `w` is [Cin, Cout, k, k]; output [Cout, H*k, W*k].
pub fn conv_transpose2d_fwd(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    k: usize,
) -> Array3<f64> {
    let (cin, h, wdt) = x.dim();
    let (cin_w, cout, kh, kw) = w.dim();
    assert_eq!(cin, cin_w);
    assert_eq!((kh, kw), (k, k));
    let x2 = x.to_shape((cin, h * wdt)).unwrap();
    let w2 = w.to_shape((cin, cout * k * k)).unwrap();
    let cols = w2.t().dot(&x2); // [Cout*k*k, H*W]
    let mut out = Array3::<f64>::zeros((cout, h * k, wdt * k));
    for co in 0..cout {
        for dy in 0..k {
            for dx in 0..k {
                let row = (co * k + dy) * k + dx;
                for iy in 0..h {
                    for ix in 0..wdt {
                        out[[co, iy * k + dy, ix * k + dx]] = cols[[row, iy * wdt + ix]];
                    }
                }
            }
        }
    }
    if let Some(bias) = b {
        for (mut plane, bv) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            plane += *bv;
        }
    }
    out
}

/// Backward of [`conv_transpose2d_fwd`]. Returns (grad x, grad w, grad bias).
pub fn conv_transpose2d_bwd(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    k: usize,
    gout: &ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cin, h, wdt) = x.dim();
    let (_, cout, _, _) = w.dim();
    let mut gcols = Array2::<f64>::zeros((cout * k * k, h * wdt));
    for co in 0..cout {
        for dy in 0..k {
            for dx in 0..k {
                let row = (co * k + dy) * k + dx;
                for iy in 0..h {
                    for ix in 0..wdt {
                        gcols[[row, iy * wdt + ix]] = gout[[co, iy * k + dy, ix * k + dx]];
                    }
                }
            }
        }
    }
    let gb = gout
        .axis_iter(Axis(0))
        .map(|plane| plane.sum())
        .collect::<Array1<f64>>();
    let x2 = x.to_shape((cin, h * wdt)).unwrap();
    let gw2 = x2.dot(&gcols.t()); // [Cin, Cout*k*k]
    let gw = gw2.into_shape((cin, cout, k, k)).unwrap();
    let w2 = w.to_shape((cin, cout * k * k)).unwrap();
    let gx2 = w2.dot(&gcols); // [Cin, H*W]
    let gx = gx2.into_shape((cin, h, wdt)).unwrap();
    (gx, gw, gb)
}

/// Bilinear upsampling of a [C, H, W] map by an integer factor, periodic in
/// longitude and edge-clamped in latitude. Cell centers are aligned so the
/// output grid covers the same area (half-pixel convention).
pub fn bilinear_upsample(x: &ArrayView3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Array3::<f64>::zeros((c, ho, wo));
    let f = factor as f64;
    for oy in 0..ho {
        // source coordinate in input cell units, half-pixel centers
        let sy = (oy as f64 + 0.5) / f - 0.5;
        let y0f = sy.floor();
        let ty = sy - y0f;
        let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
        let y1 = ((y0f as isize) + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..wo {
            let sx = (ox as f64 + 0.5) / f - 0.5;
            let x0f = sx.floor();
            let tx = sx - x0f;
            let x0 = (x0f as isize).rem_euclid(w as isize) as usize;
            let x1 = ((x0f as isize) + 1).rem_euclid(w as isize) as usize;
            for ch in 0..c {
                let v00 = x[[ch, y0, x0]];
                let v01 = x[[ch, y0, x1]];
                let v10 = x[[ch, y1, x0]];
                let v11 = x[[ch, y1, x1]];
                out[[ch, oy, ox]] = v00 * (1.0 - ty) * (1.0 - tx)
                    + v01 * (1.0 - ty) * tx
                    + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
            }
        }
    }
    out
}
