//! Codes a few test notes through the gateway in replay mode (no
//! network) and parses the responses, showing which parse route each
//! one took. A prompt that was never recorded surfaces as a fixture miss.
//!
//!     cargo run --example replay_coding

use std::path::Path;

use icdaug::dataset::SplitCorpus;
use icdaug::gateway::{EndpointConfig, Gateway, Mode};
use icdaug::postprocess::parse_coding_response;
use icdaug::prompt::build_coding_prompt;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let corpus = SplitCorpus::load(&root.join("corpus.jsonl"))?;
    let gw = Gateway::new(EndpointConfig::default(), Mode::Replay, Some(root.join("responses")), false)?;

    for doc in corpus.test.iter().take(5) {
        let spec = build_coding_prompt(&doc.text)?;
        let hash = gw.request_for(&spec).content_hash();
        let text = gw.complete(&spec)?;
        let parsed = parse_coding_response(&doc.id, &text)?;
        let gold: Vec<&str> = doc.labels.iter().map(|c| c.normalized()).collect();
        let got: Vec<String> = parsed.codes().iter().map(|c| c.normalized().to_string()).collect();
        println!("{} [{}..] route {:?}: predicted {got:?}, gold {gold:?}", doc.id, &hash[..12], parsed.route);
    }

    let unseen = build_coding_prompt("A note nobody recorded.")?;
    match gw.complete(&unseen) {
        Err(e) if e.is_fixture_miss() => println!("unrecorded prompt: {e}"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
