fn main() {
    std::process::exit(msgcn::cli::run(std::env::args_os()));
}
