//! Generate a synthetic dataset, look at a few records, and write it to disk.

use duocontrast::data::{synth_generate, Dataset};
use duocontrast::numcore::Rng;

fn main() -> duocontrast::Result<()> {
    let data = synth_generate(&mut Rng::new(42), 256, 8, 0.05)?;
    let pairs = data.train.pairs.as_ref().expect("pairs are generated");
    let triplets = data.train.triplets.as_ref().expect("triplets are generated");
    println!("{} training pairs, {} held out", pairs.len(), data.eval.len());
    let r = &pairs.records()[0];
    println!("query    {:?}\npositive {:?}", r.query, r.positive);
    println!("negatives {:?}", triplets.records()[0].negatives);
    let long = &data.train.captions_long.as_ref().unwrap().records()[0];
    println!("long caption {:?}, image {:?}", long.caption, long.image.shape());

    let dir = std::env::temp_dir().join("duocontrast_synthetic_corpus");
    data.write_dir(&dir)?;
    let back = Dataset::load_dir(&dir)?;
    println!("reloaded from {} identical: {}", dir.display(), back == data);
    Ok(())
}
