use std::collections::BTreeMap;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with("HR_")).collect();
    let code = linkhook::cli::run(&args, &env, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
