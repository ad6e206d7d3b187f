//! No-reference quality: fit pristine natural-scene statistics on a small
//! corpus, then score clean, blurred and noisy versions of a new scene.

use burstsr::imaging::add_noise;
use burstsr::quality::{quality_score, NssModel};
use burstsr::scene::{gaussian_blur, procedural_scene, scene_corpus};

fn main() -> burstsr::Result<()> {
    let model = NssModel::fit(&scene_corpus(8, 128, 0))?;
    println!(
        "pristine model fitted, shrinkage {:.3}",
        model.shrinkage().unwrap_or(f64::NAN)
    );
    let img = procedural_scene(128, 4242);
    let variants = [
        ("clean", img.clone()),
        ("blur 1", gaussian_blur(&img, 1.0)?),
        ("blur 2", gaussian_blur(&img, 2.0)?),
        ("noise", add_noise(&img, 20.0, 1)?),
    ];
    for (name, v) in &variants {
        println!("{name:<7} score {:.2}", quality_score(v, &model)?);
    }
    Ok(())
}
