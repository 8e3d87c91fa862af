fn main() {
    std::process::exit(gbnf::cli::run(std::env::args_os()));
}
