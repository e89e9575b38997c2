//! Saving, reloading and corrupting a checkpoint.

use ossem::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use ossem::config::RunConfig;
use ossem::model::ParamSet;

fn main() -> ossem::Result<()> {
    let cfg = RunConfig::micro().resolve()?;
    let params = ParamSet::init(&cfg.model, cfg.init_seed())?;
    let ckpt = Checkpoint::new(cfg.model.clone(), cfg.stft, params, Provenance::new(&cfg.to_json(), 1, 0));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path)?;
    println!("round trip equal: {}", load_checkpoint(&path)? == ckpt);

    let mut bytes = std::fs::read(&path)?;
    let n = bytes.len();
    bytes[n - 10] ^= 1;
    println!("corrupted: {}", Checkpoint::from_bytes(&bytes).unwrap_err());
    Ok(())
}
