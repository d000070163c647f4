use fogcoord::scenario::Scenario;
use fogcoord::simnet::{run_scenario, RunOptions};
fn main() {
    let text = std::fs::read_to_string("scenarios/cap_partition.toml").unwrap();
    let sc = Scenario::parse(&text).unwrap();
    let out = run_scenario(&sc, &RunOptions::default()).unwrap();
    for r in out.trace.rows() {
        let interesting = r.kind == "op-start" || r.kind == "op-done" || r.kind == "leader"
            || r.kind == "fault" || r.kind == "commit"
            || (r.kind == "send" && r.msg_kind == "propose")
            || (r.kind == "deliver" && r.msg_kind == "propose")
            || (r.kind == "deliver" && r.msg_kind == "propose-reply");
        if interesting {
            println!("{:>8} {:<10} {:<6} {:<6} {:<14} {} {}", r.time_us, r.kind, r.from, r.to, r.msg_kind, r.key, r.note);
        }
    }
}
