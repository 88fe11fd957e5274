//! Synthetic foam datasets: phantoms, raw and pre-processed sinograms for
//! the four scan variants, and flat/dark calibration stacks.

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ssct_core::losses::TrainingSample;
use ssct_core::simulation::{
    generate_foam, preprocess, simulate_dark, simulate_from_line_integrals, FlatDark, NoiseMode,
};
use ssct_core::tomo::Projector;

use crate::config::{DatasetConfig, ExperimentConfig, Layout, Split, Variant};
use crate::tensorfile::TensorFile;
use crate::{derive_seed, prepare_output_dir, write_text, BenchError};

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    dataset: &'a DatasetConfig,
}

/// Writes the complete dataset for `cfg` under `<output_dir>/data`.
pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<(), BenchError> {
    cfg.validate()?;
    let layout = cfg.layout();
    let d = &cfg.dataset;
    prepare_output_dir(&layout.data_dir(), force)?;
    let dirs = Variant::ALL
        .map(|v| layout.variant_dir(v))
        .into_iter()
        .chain([layout.data_dir().join("phantoms")]);
    for dir in dirs {
        std::fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
    }

    let mut flat_dark = Vec::new();
    for blur in [false, true] {
        let (flats, darks) = calibration_stacks(d, cfg.seed, blur)?;
        let dir = layout.stack_dir(blur);
        std::fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
        TensorFile::from_array2(&flats).write(&layout.flats(blur))?;
        TensorFile::from_array2(&darks).write(&layout.darks(blur))?;
        flat_dark.push(FlatDark::from_stacks(&[flats], &[darks])?);
    }
    for v in Variant::ALL {
        let fd = &flat_dark[v.blur() as usize];
        let both = ndarray::stack![ndarray::Axis(0), fd.flat().view(), fd.dark().view()];
        TensorFile::from_array2(&both).write(&layout.flat_dark(v))?;
    }

    let projector = Projector::new(d.full_geometry()?);
    let (angles, n_det) = projector.geometry().sino_shape();
    let limited = d.limited_angles;
    for split in Split::ALL {
        let count = d.split_size(split);
        let mut phantoms = Array3::zeros((count, d.size, d.size));
        let mut raw = [Array3::zeros((count, angles, n_det)), Array3::zeros((count, angles, n_det))];
        let mut sino = raw.clone();
        for i in 0..count {
            let x = generate_foam(&d.foam(derive_seed(cfg.seed, &format!("foam-{split}"), i as u64)))?;
            let line_integrals = projector.project(&x)?;
            phantoms.slice_mut(s![i, .., ..]).assign(&x);
            for blur in [false, true] {
                // Both detector variants see the same photon draws.
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("noise-{split}"), i as u64));
                let y = simulate_from_line_integrals(&line_integrals, &d.physics(blur), NoiseMode::Noisy, &mut rng)?;
                let p = preprocess(&y, &flat_dark[blur as usize])?;
                raw[blur as usize].slice_mut(s![i, .., ..]).assign(&y);
                sino[blur as usize].slice_mut(s![i, .., ..]).assign(&p);
            }
        }
        TensorFile::from_array3(&phantoms).write(&layout.phantoms(split))?;
        for v in Variant::ALL {
            let rows = if v.limited() { limited } else { angles };
            let b = v.blur() as usize;
            let r = raw[b].slice(s![.., ..rows, ..]).to_owned();
            let p = sino[b].slice(s![.., ..rows, ..]).to_owned();
            TensorFile::from_array3(&r).write(&layout.raw(v, split))?;
            TensorFile::from_array3(&p).write(&layout.sino(v, split))?;
        }
    }
    let manifest = Manifest {
        seed: cfg.seed,
        dataset: d,
    };
    write_text(
        &layout.data_dir().join("manifest.toml"),
        &toml::to_string(&manifest).expect("manifest serialises"),
    )
}

/// Object-free flat frames and source-off dark frames, one detector row
/// per frame. Both blur settings share their photon and read-noise draws.
pub fn calibration_stacks(
    d: &DatasetConfig,
    seed: u64,
    blur: bool,
) -> Result<(Array2<f64>, Array2<f64>), BenchError> {
    let n_det = d.n_det();
    let frames = d.calibration_frames;
    let params = d.physics(blur);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "flats", 0));
    let flats = simulate_from_line_integrals(&Array2::zeros((frames, n_det)), &params, NoiseMode::Noisy, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "darks", 0));
    let darks = simulate_dark((frames, n_det), &params, &mut rng)?;
    Ok((flats, darks))
}

pub fn load_flat_dark(layout: &Layout, variant: Variant) -> Result<FlatDark, BenchError> {
    let a = read_tensor(&layout.flat_dark(variant), "flat/dark means")?.into_array2()?;
    if a.nrows() != 2 {
        return Err(BenchError::Format("flat/dark file must have two rows".into()));
    }
    Ok(FlatDark::new(a.row(0).to_owned(), a.row(1).to_owned())?)
}

/// Frames of a calibration stack, each a single detector row.
pub fn load_stack(path: &std::path::Path) -> Result<Vec<Array2<f64>>, BenchError> {
    let a = read_tensor(path, "calibration stack")?.into_array2()?;
    Ok(a.rows()
        .into_iter()
        .map(|r| r.to_owned().insert_axis(ndarray::Axis(0)))
        .collect())
}

pub fn read_tensor(path: &std::path::Path, what: &'static str) -> Result<TensorFile, BenchError> {
    if !path.exists() {
        return Err(BenchError::Missing {
            what,
            path: path.to_path_buf(),
        });
    }
    TensorFile::read(path)
}

/// Samples of one split of one variant, with ground truth attached.
pub fn load_split(layout: &Layout, variant: Variant, split: Split) -> Result<Vec<TrainingSample>, BenchError> {
    let truth = read_tensor(&layout.phantoms(split), "phantoms")?.into_array3()?;
    let raw = read_tensor(&layout.raw(variant, split), "raw sinograms")?.into_array3()?;
    let sino = read_tensor(&layout.sino(variant, split), "sinograms")?.into_array3()?;
    if truth.dim().0 != raw.dim().0 || raw.dim() != sino.dim() {
        return Err(BenchError::Format(format!(
            "{variant}/{split}: phantom, raw and sinogram stacks disagree"
        )));
    }
    Ok((0..raw.dim().0)
        .map(|i| TrainingSample {
            raw: raw.slice(s![i, .., ..]).to_owned(),
            sino: sino.slice(s![i, .., ..]).to_owned(),
            truth: Some(truth.slice(s![i, .., ..]).to_owned()),
        })
        .collect())
}
