//! Every differentiable operation against central finite differences.

use cstvae::gradcheck;

fn run(module: &str) {
    let reports = gradcheck::suite(module, 7).unwrap().unwrap();
    let mut failed = Vec::new();
    for r in &reports {
        println!("{r}");
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    assert!(failed.is_empty(), "gradient mismatches: {failed:?}");
}

#[test]
fn tensor_ops() {
    run("tensor");
}

#[test]
fn spatial_ops() {
    run("spatial");
}

#[test]
fn vae_terms() {
    run("vae");
}

#[test]
fn stvae_end_to_end() {
    run("stvae");
}

#[test]
fn cstvae_two_layer_end_to_end() {
    run("cstvae");
}
