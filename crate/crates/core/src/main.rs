fn main() {
    std::process::exit(amyloid_synth::cli::run(std::env::args_os().skip(1)));
}
