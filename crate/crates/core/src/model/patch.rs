use crate::diffcore::{ops, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Patches per image side.
pub const GRID_SIDE: usize = 4;

/// Splits a `C × H × W` image into a 4 × 4 grid of `C × H/4 × W/4` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !height.is_multiple_of(GRID_SIDE) || !width.is_multiple_of(GRID_SIDE) {
            return Err(Error::invalid(format!(
                "image size {}x{} is not divisible by {}; resize first (e.g. 28x28 -> 32x32)",
                height, width, GRID_SIDE
            )));
        }
        Ok(PatchGrid {
            channels,
            height,
            width,
        })
    }

    pub fn patch_rows(&self) -> usize {
        self.height / GRID_SIDE
    }

    pub fn patch_cols(&self) -> usize {
        self.width / GRID_SIDE
    }

    /// Number of patches, always 16.
    pub fn patch_count(&self) -> usize {
        GRID_SIDE * GRID_SIDE
    }

    /// Values per flattened patch, `C · H/4 · W/4`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_rows() * self.patch_cols()
    }

    /// Values per image, `C · H · W`.
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn split_shape(&self, batch: usize) -> [usize; 6] {
        [
            batch,
            self.channels,
            GRID_SIDE,
            self.patch_rows(),
            GRID_SIDE,
            self.patch_cols(),
        ]
    }
}

// [B, C, gy, py, gx, px] -> [B, gy, gx, C, py, px]
const TO_PATCHES: [usize; 6] = [0, 2, 4, 1, 3, 5];
const FROM_PATCHES: [usize; 6] = [0, 3, 1, 4, 2, 5];

/// Rows are patches in raster order; each row is flattened channel-major.
pub fn patchify(image: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    if image.shape() != [grid.channels, grid.height, grid.width] {
        return Err(Error::shape(
            "patchify",
            format!("image {:?} does not match grid {:?}", image.shape(), grid),
        ));
    }
    let split = ops::reshape(image, &grid.split_shape(1))?;
    let patches = ops::permute(&split, &TO_PATCHES)?;
    ops::reshape(&patches, &[grid.patch_count(), grid.patch_len()])
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    if patches.shape() != [grid.patch_count(), grid.patch_len()] {
        return Err(Error::shape(
            "unpatchify",
            format!("patches {:?} do not match grid {:?}", patches.shape(), grid),
        ));
    }
    let split = ops::reshape(
        patches,
        &[1, GRID_SIDE, GRID_SIDE, grid.channels, grid.patch_rows(), grid.patch_cols()],
    )?;
    let image = ops::permute(&split, &FROM_PATCHES)?;
    ops::reshape(&image, &[grid.channels, grid.height, grid.width])
}

/// Taped patchify of a `[B, C, H, W]` batch into `[B·16, patch_len]` tokens.
pub fn patchify_batch(tape: &mut Tape, images: Var, grid: &PatchGrid) -> Result<Var> {
    let batch = tape.shape(images)[0];
    if tape.shape(images) != [batch, grid.channels, grid.height, grid.width] {
        return Err(Error::shape(
            "patchify",
            format!("batch {:?} does not match grid {:?}", tape.shape(images), grid),
        ));
    }
    let split = tape.reshape(images, &grid.split_shape(batch))?;
    let patches = tape.permute(split, &TO_PATCHES)?;
    tape.reshape(patches, &[batch * grid.patch_count(), grid.patch_len()])
}

/// Taped inverse of [`patchify_batch`].
pub fn unpatchify_batch(tape: &mut Tape, tokens: Var, grid: &PatchGrid) -> Result<Var> {
    let rows = tape.shape(tokens)[0];
    if !rows.is_multiple_of(grid.patch_count()) || tape.shape(tokens)[1..] != [grid.patch_len()] {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {:?} do not match grid {:?}", tape.shape(tokens), grid),
        ));
    }
    let batch = rows / grid.patch_count();
    let split = tape.reshape(
        tokens,
        &[batch, GRID_SIDE, GRID_SIDE, grid.channels, grid.patch_rows(), grid.patch_cols()],
    )?;
    let images = tape.permute(split, &FROM_PATCHES)?;
    tape.reshape(images, &[batch, grid.channels, grid.height, grid.width])
}

/// Sinusoidal position table: `sin` in even columns, `cos` in odd ones.
pub fn positional_encoding(positions: usize, width: usize) -> Result<Tensor> {
    if !width.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "positional encoding width must be even, got {}",
            width
        )));
    }
    let mut data = Vec::with_capacity(positions * width);
    for pos in 0..positions {
        for j in 0..width / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * j) as f64 / width as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![positions, width], data)
}
