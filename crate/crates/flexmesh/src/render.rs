//! Differentiable piecewise-affine image warping and frame emission.
//!
//! A deformed mesh drags the source image with it: every output pixel whose
//! center falls inside a deformed triangle samples the source at the
//! matching barycentric point of the rest triangle (bilinear, edges
//! clamped). Pixels outside the mesh stay transparent. When triangles
//! overlap, the face listed last wins, deterministically.
//!
//! [`warp_gradient`] backpropagates a per-pixel cotangent to the deformed
//! vertex positions analytically: barycentric coordinates are smooth in the
//! vertices for a fixed coverage pattern, so away from coverage boundaries
//! the gradient is exact.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbaImage};

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::mesh::TriMesh;
use crate::scalar::{real, to_f64, Real};

/// RGBA raster with channel values in `[0, 1]`, row major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> RasterImage<T> {
    /// Fully transparent image.
    pub fn new(width: usize, height: usize) -> Self {
        RasterImage {
            width,
            height,
            data: vec![T::zero(); width * height * 4],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; 4]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                img.data[(y * width + x) * 4..][..4].copy_from_slice(&px);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [T; 4] {
        let at = (y * self.width + x) * 4;
        [self.data[at], self.data[at + 1], self.data[at + 2], self.data[at + 3]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, px: [T; 4]) {
        let at = (y * self.width + x) * 4;
        self.data[at..at + 4].copy_from_slice(&px);
    }

    pub fn from_rgba8(img: &RgbaImage) -> Self {
        let scale = real::<T>(1.0 / 255.0);
        RasterImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| real::<T>(b as f64) * scale).collect(),
        }
    }

    /// Quantizes to 8-bit, clamping out-of-range values.
    pub fn to_rgba8(&self) -> RgbaImage {
        let mut out = RgbaImage::new(self.width as u32, self.height as u32);
        for (slot, &v) in out.as_mut().iter_mut().zip(&self.data) {
            let x = (to_f64(v).clamp(0.0, 1.0) * 255.0).round();
            *slot = x as u8;
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgba8();
        Ok(Self::from_rgba8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgba8().save(path)?;
        Ok(())
    }

    /// Bilinear sample at source pixel coordinates, edges clamped. Texel
    /// centers sit at half-integer coordinates.
    pub fn sample(&self, sx: T, sy: T) -> [T; 4] {
        let (c00, c10, c01, c11, fx, fy) = self.sample_support(sx, sy);
        let mut out = [T::zero(); 4];
        for ch in 0..4 {
            let top = c00[ch] + (c10[ch] - c00[ch]) * fx;
            let bot = c01[ch] + (c11[ch] - c01[ch]) * fx;
            out[ch] = top + (bot - top) * fy;
        }
        out
    }

    /// Spatial derivative of [`Self::sample`]: `d sample[ch] / d (sx, sy)`.
    pub fn sample_gradient(&self, sx: T, sy: T) -> [[T; 2]; 4] {
        let (c00, c10, c01, c11, fx, fy) = self.sample_support(sx, sy);
        let mut out = [[T::zero(); 2]; 4];
        for ch in 0..4 {
            let dx_top = c10[ch] - c00[ch];
            let dx_bot = c11[ch] - c01[ch];
            out[ch][0] = dx_top + (dx_bot - dx_top) * fy;
            let top = c00[ch] + dx_top * fx;
            let bot = c01[ch] + dx_bot * fx;
            out[ch][1] = bot - top;
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn sample_support(&self, sx: T, sy: T) -> ([T; 4], [T; 4], [T; 4], [T; 4], T, T) {
        let half = real::<T>(0.5);
        let u = sx - half;
        let v = sy - half;
        let x0f = u.floor();
        let y0f = v.floor();
        let fx = u - x0f;
        let fy = v - y0f;
        let clamp = |i: f64, hi: usize| -> usize {
            if i < 0.0 {
                0
            } else if i as usize >= hi {
                hi - 1
            } else {
                i as usize
            }
        };
        let x0 = clamp(to_f64(x0f), self.width);
        let x1 = clamp(to_f64(x0f) + 1.0, self.width);
        let y0 = clamp(to_f64(y0f), self.height);
        let y1 = clamp(to_f64(y0f) + 1.0, self.height);
        (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
            fx,
            fy,
        )
    }
}

/// Winning face and barycentric coordinates per covered output pixel.
struct Coverage<T> {
    entries: Vec<Option<(usize, [T; 3])>>,
    width: usize,
}

/// Rasterizes deformed triangles over an output grid. Faces are visited in
/// order and later faces overwrite earlier ones. Inverted faces (negative
/// area after deformation) still render; they are counted and reported via
/// a warning because they usually indicate an over-aggressive deformation.
fn rasterize<T: Real>(
    faces: &[[usize; 3]],
    deformed_px: &[Vec2<T>],
    out_w: usize,
    out_h: usize,
) -> Coverage<T> {
    let mut entries: Vec<Option<(usize, [T; 3])>> = vec![None; out_w * out_h];
    let mut inverted = 0usize;
    let tiny = real::<T>(1e-12);
    let half = real::<T>(0.5);
    for (fi, face) in faces.iter().enumerate() {
        let d = [deformed_px[face[0]], deformed_px[face[1]], deformed_px[face[2]]];
        let a2 = cross(sub(d[1], d[0]), sub(d[2], d[0]));
        if a2.abs() < tiny {
            continue;
        }
        if a2 < T::zero() {
            inverted += 1;
        }
        let xs = [d[0][0], d[1][0], d[2][0]];
        let ys = [d[0][1], d[1][1], d[2][1]];
        let min_x = to_f64(xs.iter().copied().fold(T::infinity(), T::min)).floor().max(0.0) as usize;
        let max_x = to_f64(xs.iter().copied().fold(T::neg_infinity(), T::max)).ceil() as isize;
        let min_y = to_f64(ys.iter().copied().fold(T::infinity(), T::min)).floor().max(0.0) as usize;
        let max_y = to_f64(ys.iter().copied().fold(T::neg_infinity(), T::max)).ceil() as isize;
        let max_x = (max_x.max(0) as usize).min(out_w);
        let max_y = (max_y.max(0) as usize).min(out_h);
        for py in min_y..max_y {
            for px in min_x..max_x {
                let c = [real::<T>(px as f64) + half, real::<T>(py as f64) + half];
                let n0 = cross(sub(d[2], d[1]), sub(c, d[1]));
                let n1 = cross(sub(d[0], d[2]), sub(c, d[2]));
                let n2 = cross(sub(d[1], d[0]), sub(c, d[0]));
                let l = [n0 / a2, n1 / a2, n2 / a2];
                if l[0] >= T::zero() && l[1] >= T::zero() && l[2] >= T::zero() {
                    entries[py * out_w + px] = Some((fi, l));
                }
            }
        }
    }
    if inverted > 0 {
        log::warn!("rasterized {inverted} inverted (flipped) triangles");
    }
    Coverage { entries, width: out_w }
}

#[inline]
fn sub<T: Real>(a: Vec2<T>, b: Vec2<T>) -> Vec2<T> {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn cross<T: Real>(a: Vec2<T>, b: Vec2<T>) -> T {
    a[0] * b[1] - a[1] * b[0]
}

fn check_deformed<T: Real>(mesh: &TriMesh<T>, deformed: &[Vec2<T>]) -> Result<()> {
    if deformed.len() != mesh.vertex_count() {
        return Err(Error::invalid(format!(
            "deformed vertex set has {} entries, mesh has {}",
            deformed.len(),
            mesh.vertex_count()
        )));
    }
    if deformed.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
        return Err(Error::invalid("deformed vertices contain non-finite values"));
    }
    Ok(())
}

fn to_pixels<T: Real>(points: &[Vec2<T>], w: usize, h: usize) -> Vec<Vec2<T>> {
    let (wf, hf) = (real::<T>(w as f64), real::<T>(h as f64));
    points.iter().map(|p| [p[0] * wf, p[1] * hf]).collect()
}

/// Warps `image` by the mesh deformation, producing an output of the same
/// resolution.
pub fn warp<T: Real>(
    image: &RasterImage<T>,
    mesh: &TriMesh<T>,
    deformed: &[Vec2<T>],
) -> Result<RasterImage<T>> {
    warp_to(image, mesh, deformed, image.width(), image.height())
}

/// Warps `image` into an `out_w` by `out_h` output raster. Mesh coordinates
/// are normalized, so source sampling scales with the source resolution and
/// coverage with the output resolution.
pub fn warp_to<T: Real>(
    image: &RasterImage<T>,
    mesh: &TriMesh<T>,
    deformed: &[Vec2<T>],
    out_w: usize,
    out_h: usize,
) -> Result<RasterImage<T>> {
    check_deformed(mesh, deformed)?;
    let deformed_px = to_pixels(deformed, out_w, out_h);
    let rest_px = to_pixels(mesh.vertices(), image.width(), image.height());
    let coverage = rasterize(mesh.faces(), &deformed_px, out_w, out_h);
    let mut out = RasterImage::new(out_w, out_h);
    for py in 0..out_h {
        for px in 0..out_w {
            if let Some((fi, l)) = coverage.entries[py * coverage.width + px] {
                let face = mesh.faces()[fi];
                let mut src = [T::zero(); 2];
                for i in 0..3 {
                    src[0] += l[i] * rest_px[face[i]][0];
                    src[1] += l[i] * rest_px[face[i]][1];
                }
                out.set_pixel(px, py, image.sample(src[0], src[1]));
            }
        }
    }
    Ok(out)
}

/// Backpropagates a cotangent on the warped output to the deformed vertex
/// positions (same resolution as the source; see [`warp_gradient_to`]).
pub fn warp_gradient<T: Real>(
    image: &RasterImage<T>,
    mesh: &TriMesh<T>,
    deformed: &[Vec2<T>],
    d_output: &RasterImage<T>,
) -> Result<Vec<Vec2<T>>> {
    warp_gradient_to(image, mesh, deformed, d_output, image.width(), image.height())
}

/// Gradient of [`warp_to`] with respect to the deformed vertices.
///
/// For each covered pixel the chain is: output channel -> bilinear source
/// gradient -> barycentric weights -> deformed corner positions. The
/// barycentric weight of corner `i` is the ratio of edge function `n_i` to
/// the doubled signed area `a2`, so its derivative with respect to a corner
/// `k` is `(dn_i/dk - l_i * da2/dk) / a2`, with the edge-function partials
/// written out below.
pub fn warp_gradient_to<T: Real>(
    image: &RasterImage<T>,
    mesh: &TriMesh<T>,
    deformed: &[Vec2<T>],
    d_output: &RasterImage<T>,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<Vec2<T>>> {
    check_deformed(mesh, deformed)?;
    if d_output.width() != out_w || d_output.height() != out_h {
        return Err(Error::invalid(format!(
            "output cotangent is {}x{}, expected {out_w}x{out_h}",
            d_output.width(),
            d_output.height()
        )));
    }
    let deformed_px = to_pixels(deformed, out_w, out_h);
    let rest_px = to_pixels(mesh.vertices(), image.width(), image.height());
    let coverage = rasterize(mesh.faces(), &deformed_px, out_w, out_h);
    let mut d_px = vec![[T::zero(); 2]; deformed.len()];
    let half = real::<T>(0.5);
    for py in 0..out_h {
        for px in 0..out_w {
            let Some((fi, l)) = coverage.entries[py * coverage.width + px] else {
                continue;
            };
            let d_pix = d_output.pixel(px, py);
            if d_pix.iter().all(|&g| g == T::zero()) {
                continue;
            }
            let face = mesh.faces()[fi];
            let d = [
                deformed_px[face[0]],
                deformed_px[face[1]],
                deformed_px[face[2]],
            ];
            let r = [rest_px[face[0]], rest_px[face[1]], rest_px[face[2]]];
            let mut src = [T::zero(); 2];
            for i in 0..3 {
                src[0] += l[i] * r[i][0];
                src[1] += l[i] * r[i][1];
            }
            // d loss / d source position.
            let grad_ch = image.sample_gradient(src[0], src[1]);
            let mut d_src = [T::zero(); 2];
            for ch in 0..4 {
                d_src[0] += d_pix[ch] * grad_ch[ch][0];
                d_src[1] += d_pix[ch] * grad_ch[ch][1];
            }
            // d loss / d barycentric weight.
            let d_l = [
                d_src[0] * r[0][0] + d_src[1] * r[0][1],
                d_src[0] * r[1][0] + d_src[1] * r[1][1],
                d_src[0] * r[2][0] + d_src[1] * r[2][1],
            ];
            let c = [real::<T>(px as f64) + half, real::<T>(py as f64) + half];
            let a2 = cross(sub(d[1], d[0]), sub(d[2], d[0]));
            // Edge-function partials: n_i = cross(d[i+2] - d[i+1], c - d[i+1])
            // gives dn_i/dd[i+2] = rot(c - d[i+1]) and
            // dn_i/dd[i+1] = -rot(c - d[i+2]), where rot(w) = (w.y, -w.x).
            let rot = |w: Vec2<T>| -> Vec2<T> { [w[1], -w[0]] };
            let mut dn = [[[T::zero(); 2]; 3]; 3]; // dn[i][k] = dn_i / dd_k
            for i in 0..3 {
                let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                dn[i][i2] = rot(sub(c, d[i1]));
                let m = rot(sub(c, d[i2]));
                dn[i][i1] = [-m[0], -m[1]];
            }
            // a2 is the sum of the three edge functions.
            let mut da2 = [[T::zero(); 2]; 3];
            for k in 0..3 {
                for i in 0..3 {
                    da2[k][0] += dn[i][k][0];
                    da2[k][1] += dn[i][k][1];
                }
            }
            for k in 0..3 {
                let mut acc = [T::zero(); 2];
                for i in 0..3 {
                    for c2 in 0..2 {
                        acc[c2] += d_l[i] * (dn[i][k][c2] - l[i] * da2[k][c2]) / a2;
                    }
                }
                d_px[face[k]][0] += acc[0];
                d_px[face[k]][1] += acc[1];
            }
        }
    }
    // Chain through the normalized-to-pixel scaling.
    let (wf, hf) = (real::<T>(out_w as f64), real::<T>(out_h as f64));
    Ok(d_px.into_iter().map(|g| [g[0] * wf, g[1] * hf]).collect())
}

/// Writes frames as `frame_0000.png`, `frame_0001.png`, ... and returns the
/// paths.
pub fn emit_frames<T: Real>(frames: &[RasterImage<T>], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:04}.png"));
        frame.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Encodes frames into a looping GIF at `fps` frames per second.
pub fn emit_gif<T: Real>(frames: &[RasterImage<T>], path: &Path, fps: u32) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot encode an empty GIF"));
    }
    if fps == 0 {
        return Err(Error::invalid("GIF frame rate must be positive"));
    }
    let file = fs::File::create(path)?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)
        .map_err(|e| Error::Image(image::ImageError::from(e)))?;
    let delay = Delay::from_numer_denom_ms(1000, fps);
    for frame in frames {
        let f = Frame::from_parts(frame.to_rgba8(), 0, 0, delay);
        enc.encode_frame(f).map_err(Error::Image)?;
    }
    Ok(())
}

/// Composites a warped frame over a solid background color, useful for
/// preview output where transparency would hide the subject.
pub fn over_background<T: Real>(frame: &RasterImage<T>, rgb: [T; 3]) -> RasterImage<T> {
    let mut out = RasterImage::new(frame.width(), frame.height());
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let p = frame.pixel(x, y);
            let a = p[3];
            let inv = T::one() - a;
            out.set_pixel(
                x,
                y,
                [
                    p[0] * a + rgb[0] * inv,
                    p[1] * a + rgb[1] * inv,
                    p[2] * a + rgb[2] * inv,
                    T::one(),
                ],
            );
        }
    }
    out
}
