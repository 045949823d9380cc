//! Writes a benchmark as a document, reads it back, refines it and prints the
//! incidence structure.
//!
//! Usage: `cargo run --release --example network_io -- [cyclic5|tree25|pipe5km|pipe50km]`

use gasnet::bench;
use gasnet::incidence::{assemble, volume_matrix};
use gasnet::network::{parse_network, refine, to_document};

fn main() -> gasnet::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "cyclic5".into());
    let b = bench::by_name(&name)?;
    let text = to_document(&b.network, None);
    let net = parse_network(&text)?;
    assert_eq!(net, b.network);
    println!(
        "{name}: {} nodes, {} pipes, {} compressors, {:.1} km of pipe",
        net.nodes.len(),
        net.pipes.len(),
        net.compressors.len(),
        net.total_length() / 1000.0
    );

    let r = refine(&net, b.max_segment)?;
    println!(
        "refined at {:.1} km: {} nodes, {} segments, state dimension {}",
        b.max_segment / 1000.0,
        r.n_nodes(),
        r.n_edges(),
        r.state_dim()
    );
    let inc = assemble(&r, &vec![1.0; r.n_compressors()])?;
    let lambda = volume_matrix(&r)?;
    println!("incidence nonzeros: M {}, Q {}", inc.m.nnz(), inc.q.nnz());
    println!(
        "largest node volume {:.1} m³, smallest {:.1} m³",
        lambda.max(),
        lambda.min()
    );
    Ok(())
}
