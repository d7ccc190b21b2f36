use fttr_sim::scenario::serialize;
use fttr_sim::topology::Scenario;

fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
    std::fs::write(format!("{dir}/default.scn"), serialize(&Scenario::paper_default("8K"))).unwrap();
    std::fs::write(format!("{dir}/handover.scn"), serialize(&Scenario::handover_demo_default()))
        .unwrap();
}
