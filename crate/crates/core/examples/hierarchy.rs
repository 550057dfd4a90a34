//! Code parsing, families, siblings, ancestor chains and description
//! lookup on the shipped fixture table.
//!
//!     cargo run --example hierarchy

use std::path::Path;

use icdaug::icd::{family_of, siblings, DepthPolicy, DescriptionIndex, Hierarchy, IcdCode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for raw in ["E10.21", "e1021", "0DTJ4ZZ", "G43"] {
        let code = IcdCode::parse_any(raw)?;
        println!("{raw:>8} -> {} ({:?}), dotted {}, family {}", code.normalized(), code.system(), code.dotted(), family_of(&code));
    }
    for bad in ["E1", "12345678", "E10-21"] {
        println!("{bad:>8} -> {}", IcdCode::parse_any(bad).unwrap_err());
    }

    let universe: Vec<IcdCode> = ["E1021", "E1029", "E103", "G430"]
        .iter()
        .map(|s| IcdCode::parse_any(s))
        .collect::<Result<_, _>>()?;
    let e1021 = &universe[0];
    println!("siblings of E1021: {:?}", siblings(e1021, &universe).iter().map(IcdCode::normalized).collect::<Vec<_>>());
    println!("family-only chain: {:?}", Hierarchy::family_only().chain(e1021));
    println!("prefix chain:      {:?}", Hierarchy::new(DepthPolicy::PrefixDepths(vec![3, 4])).chain(e1021));

    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/descriptions.csv");
    let index = DescriptionIndex::from_path(&table)?;
    println!("{} titles loaded", index.len());
    for (code, title) in index.iter().take(3) {
        println!("  {code}: {title}");
    }
    let unknown = IcdCode::parse_any("Z999")?;
    println!("unknown code resolves to {:?}", index.resolve(&unknown).title);
    Ok(())
}
