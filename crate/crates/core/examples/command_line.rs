//! The `burstsr` command line driven in-process: simulate a burst, reconstruct
//! it with the classic method and evaluate the result against the reference frame.

use burstsr::cli::run;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let steps: [Vec<String>; 3] = [
        vec![
            "simulate".into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            p("burst"),
        ],
        vec![
            "sr".into(),
            p("burst"),
            "--method".into(),
            "classic".into(),
            "--out".into(),
            p("sr"),
        ],
        vec![
            "evaluate".into(),
            p("sr/sr.f32"),
            "--reference".into(),
            p("burst/frame_000.f32"),
            "--out".into(),
            p("eval"),
        ],
    ];
    for args in steps {
        println!("$ burstsr {}", args.join(" "));
        let code = run(std::iter::once("burstsr".to_string()).chain(args));
        if code != 0 {
            eprintln!("exit code {code}");
            std::process::exit(i32::from(code));
        }
    }
    let manifest = std::fs::read_to_string(root.join("eval/manifest.json")).expect("manifest");
    println!("{manifest}");
}
