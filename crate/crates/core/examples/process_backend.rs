//! Drives certification through an out-of-process backend speaking the
//! newline-delimited JSON protocol. Run without arguments, the example
//! re-launches itself with `--serve` as the bundled stub server.

use std::io::BufReader;

use patchcert::backend::stub::{serve_stub, StubOptions, StubSegment};
use patchcert::backend::{ProcessBackend, ProcessConfig};
use patchcert::certify::certify_detection;
use patchcert::grid::ThreatModel;
use patchcert::maskgen::build_detection_column_masks;
use patchcert::scene::{generate_scene, SceneSpec};

pub fn run(command: Vec<String>) -> patchcert::Result<()> {
    let backend = ProcessBackend::spawn(ProcessConfig::new(command))?;
    println!("handshake: {:?}", backend.handshake());
    let scene = generate_scene(SceneSpec::new(20, 20), 2)?;
    let tm = ThreatModel::new(20, 20, 3, 3)?;
    let ms = build_detection_column_masks(&tm, 6)?;
    let out = certify_detection(&scene.image, &ms, &backend, &backend, false)?;
    println!(
        "{} masks over the wire, {:.1}% verified, matches ground truth: {}",
        ms.len(),
        100.0 * out.certified_fraction(),
        out.segmentation() == &scene.ground_truth
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> patchcert::Result<()> {
    if std::env::args().nth(1).as_deref() == Some("--serve") {
        let opts = StubOptions { segment: StubSegment::DominantChannel, ..StubOptions::default() };
        return serve_stub(opts, BufReader::new(std::io::stdin()), std::io::stdout());
    }
    let me = std::env::current_exe()?.to_string_lossy().into_owned();
    run(vec![me, "--serve".into()])
}
