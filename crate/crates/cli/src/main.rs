fn main() {
    std::process::exit(hotspot_cli::dispatch(std::env::args_os()));
}
