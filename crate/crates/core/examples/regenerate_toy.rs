//! Rewrites `data/toy/` from the default toy-world generator.

use std::fs;
use std::path::Path;

use fairdec::synthetic::{toy_gender_world, ToyConfig};

fn main() -> fairdec::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
    fs::create_dir_all(&dir)?;
    let world = toy_gender_world(&ToyConfig::default())?;
    let mut emb = Vec::new();
    world.table.write(&mut emb)?;
    fs::write(dir.join("embeddings.txt"), emb)?;
    fs::write(dir.join("corpus.txt"), world.corpus.join("\n") + "\n")?;
    println!(
        "{} tokens, {} sentences",
        world.table.len(),
        world.corpus.len()
    );
    Ok(())
}
