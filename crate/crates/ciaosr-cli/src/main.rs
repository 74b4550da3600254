fn main() {
    std::process::exit(ciaosr_cli::run());
}
