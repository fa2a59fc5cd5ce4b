use image::{GrayImage, RgbImage};
use poseedit::conditioning::{neutral_skeleton, Conditioner, PoseTokenMode, Variant};
use poseedit::dataset::PipelineSettings;
use poseedit::diffusion::train::TrainSettings;
use poseedit::diffusion::{make_schedule, sample_edit, DenoiserConfig, SampleOptions, Trainer, UNetDenoiser};
use poseedit::synthetic::training_pairs;
use poseedit::training_data::{build_example, PairView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn psnr_inside(img: &RgbImage, target: &RgbImage, mask: &GrayImage) -> f64 {
    let (mut se, mut n) = (0.0, 0.0);
    for (x, y, m) in mask.enumerate_pixels() {
        if m[0] > 0 {
            for c in 0..3 {
                let d = img.get_pixel(x, y)[c] as f64 - target.get_pixel(x, y)[c] as f64;
                se += d * d;
                n += 1.0;
            }
        }
    }
    10.0 * (255.0f64.powi(2) / (se / n)).log10()
}

#[test]
fn single_pair_overfit_reproduces_the_target() {
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let pairs = training_pairs(1, 32, 7);
    let p = &pairs[0];
    let mut cond = Conditioner::toy(Variant::ImgPoseText, PoseTokenMode::Target, neutral_skeleton(32.0, 32.0), 7);
    let view = PairView {
        target: &p.target,
        mask: &p.mask,
        reference_crop: &p.reference_crop,
        caption: p.pair.caption.as_deref(),
        target_pose: &p.pair.target_pose,
        reference_pose: &p.pair.reference_pose,
    };
    let example = build_example(&cond, view, 32, PipelineSettings::default().fill_value).unwrap();
    let mut model = UNetDenoiser::new(DenoiserConfig::default(), &schedule, 7);
    let mut pose = cond.pose_projection.clone();
    let settings = TrainSettings { epochs: 1600, learning_rate: 3e-3, checkpoint_every: 0, ..Default::default() };
    Trainer::new(settings, 7).run(&mut model, Some(&mut pose), &[example], &schedule, &mut |_, _, _| Ok(())).unwrap();

    cond.pose_projection = pose;
    let bundle = cond
        .bundle(&p.reference_crop, p.pair.caption.as_deref(), Some(&p.pair.target_pose), Some(&p.pair.reference_pose))
        .unwrap();
    let options = SampleOptions { guidance_weight: 1.0, ..Default::default() };
    let edited = sample_edit(&model, 32, &p.masked_target, &p.mask, &bundle, &schedule, &options, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let psnr = psnr_inside(&edited, &p.target, &p.mask);
    println!("PSNR inside the mask {psnr:.2} dB");
    assert!(psnr >= 25.0, "PSNR inside the mask {psnr:.2} dB");
}
