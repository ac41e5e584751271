/// Bilinear resize with pixel-centre alignment and edge-clamped sampling.
///
/// Destination pixel `d` samples source coordinate `(d + 0.5) * src / dst - 0.5`,
/// clamped into the source grid. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), src_h * src_w);
    let axis = |dst: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * src_len as f64 / dst as f64 - 0.5)
                    .clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(dst_h, src_h);
    let xs = axis(dst_w, src_w);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
