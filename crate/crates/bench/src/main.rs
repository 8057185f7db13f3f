fn main() {
    std::process::exit(cbfrrt_bench::cli::run(std::env::args_os()));
}
