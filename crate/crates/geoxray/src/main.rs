use geoxray::cli;

fn main() {
    std::process::exit(cli::run());
}
