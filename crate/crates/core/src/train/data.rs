use rand::Rng;

use crate::embed::{Image, MultiViewFrame};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::rules::ContextVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// One uniformly random frame per segment.
    Train,
    /// The centre frame of each segment.
    Eval,
}

/// Frame indices for `steps` equal-duration segments of `n_frames` frames.
pub fn sample_frames(n_frames: usize, steps: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if steps == 0 || n_frames < steps {
        return Err(Error::contract(format!(
            "cannot sample {steps} segments from {n_frames} frames"
        )));
    }
    Ok((0..steps)
        .map(|i| {
            let (lo, hi) = segment(i, n_frames, steps);
            match mode {
                SampleMode::Train => rng.random_range(lo..hi),
                SampleMode::Eval => lo + (hi - lo) / 2,
            }
        })
        .collect())
}

/// Half-open frame range of segment `i`.
pub fn segment(i: usize, n_frames: usize, steps: usize) -> (usize, usize) {
    (i * n_frames / steps, (i + 1) * n_frames / steps)
}

/// Pads every view by `pad` zero pixels and crops back to the original size
/// at offset `(dy, dx)` in `0..=2 pad`.
pub fn crop_image(img: &Image, pad: usize, dy: usize, dx: usize) -> Result<Image> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut px = vec![0.0f32; c * h * w];
    for y in 0..h {
        let sy = (y + dy) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + dx) as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for ch in 0..c {
                px[(y * w + x) * c + ch] = img.get(sy as usize, sx as usize, ch);
            }
        }
    }
    Image::new(c, h, w, px)
}

pub fn flip_image(img: &Image) -> Result<Image> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut px = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                px.push(img.get(y, w - 1 - x, ch));
            }
        }
    }
    Image::new(c, h, w, px)
}

/// Mirror image of a class name (`left_*` and `right_*` swap).
pub fn mirror_class(classes: &[String], label: usize) -> usize {
    let name = &classes[label];
    let mirrored = if let Some(rest) = name.strip_prefix("left") {
        format!("right{rest}")
    } else if let Some(rest) = name.strip_prefix("right") {
        format!("left{rest}")
    } else {
        return label;
    };
    classes.iter().position(|c| *c == mirrored).unwrap_or(label)
}

/// Swaps the leftmost-lane and rightmost-lane bits.
pub fn mirror_context(c: &ContextVector) -> ContextVector {
    let mut bits = c.bits().to_vec();
    if bits.len() >= 2 {
        bits.swap(0, 1);
    }
    ContextVector::new(bits)
}

/// Training view of one episode after sampling and augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: Vec<MultiViewFrame>,
    pub label: usize,
    pub context: ContextVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub crop_pad: usize,
    pub flip: bool,
}

/// Samples `steps` frames and applies one crop offset and flip decision to
/// the whole episode.
pub fn prepare_sample(
    ep: &Episode,
    steps: usize,
    mode: SampleMode,
    augment: Augment,
    classes: &[String],
    rng: &mut impl Rng,
) -> Result<Sample> {
    let idx = sample_frames(ep.frames.len(), steps, mode, rng)?;
    let mut frames: Vec<MultiViewFrame> = idx.iter().map(|&i| ep.frames[i].clone()).collect();
    let mut label = ep.label;
    let mut context = ep.context.clone();
    if mode == SampleMode::Train {
        if augment.crop_pad > 0 {
            let dy = rng.random_range(0..=2 * augment.crop_pad);
            let dx = rng.random_range(0..=2 * augment.crop_pad);
            frames = frames
                .iter()
                .map(|f| {
                    let views = f
                        .views()
                        .iter()
                        .map(|v| crop_image(v, augment.crop_pad, dy, dx))
                        .collect::<Result<_>>()?;
                    MultiViewFrame::new(views)
                })
                .collect::<Result<_>>()?;
        }
        if augment.flip && rng.random_bool(0.5) {
            frames = frames
                .iter()
                .map(|f| MultiViewFrame::new(f.views().iter().map(flip_image).collect::<Result<_>>()?))
                .collect::<Result<_>>()?;
            label = mirror_class(classes, label);
            context = mirror_context(&context);
        }
    }
    Ok(Sample {
        frames,
        label,
        context,
    })
}
