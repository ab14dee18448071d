use log::info;
use pathdiff::datasets::{generate_with, write_contact_sheet, DatasetKind};
use pathdiff::denoiser::CountingModel;
use pathdiff::metrics::sliced_wasserstein;
use pathdiff::persistence::{checkpoint_id, Checkpoint, ModelRole, SampleFile};
use pathdiff::sampler::{make_step_schedule, sample};
use pathdiff::{Error, Result};

use crate::SampleArgs;

const REFERENCE_SIZE: usize = 2000;
const PROJECTIONS: usize = 64;

pub fn run(args: &SampleArgs) -> Result<()> {
    let bytes = std::fs::read(&args.checkpoint).map_err(|e| Error::io(&args.checkpoint, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let id = checkpoint_id(&bytes);
    let schedule = ck.noise_schedule()?;
    let path = make_step_schedule(schedule.timesteps(), args.nfe, args.strategy.into())?;
    let role: ModelRole = args.model.into();
    let model = ck.model(role);
    let dims = ck.normalization.dims();

    let counter = CountingModel::new(model);
    let normalized = sample(&counter, &schedule, &path, args.batch, dims, 0.0, args.seed)?;
    info!("network evaluations: {}", counter.calls());
    println!("path {:?}, network evaluations: {}", path.steps(), counter.calls());

    let data = ck.normalization.invert(normalized.view())?;
    let file = SampleFile::new(data, args.seed, path.steps().to_vec(), id, role.name());
    file.save(&args.out)?;
    if dims == 2 {
        let txt = args.out.with_extension("txt");
        std::fs::write(&txt, file.to_text()).map_err(|e| Error::io(&txt, e))?;
    }
    if let Some(shape) = ck.image_shape {
        let cols = (args.batch as f64).sqrt().ceil() as usize;
        write_contact_sheet(file.data.view(), shape, cols, &args.out.with_extension("png"))?;
    }
    if ck.config.dataset != DatasetKind::TinyImagesDir {
        let reference = generate_with(&ck.config.reference_spec(REFERENCE_SIZE), &ck.normalization)?;
        let sw = sliced_wasserstein(normalized.view(), reference.data.view(), PROJECTIONS, args.seed)?;
        if !sw.is_finite() {
            return Err(Error::NonFinite("sliced Wasserstein distance".into()));
        }
        info!("sliced_wasserstein to reference: {sw:.6}");
        println!("sliced_wasserstein to reference: {sw:.6}");
    }
    println!("{}", args.out.display());
    Ok(())
}
