// The tape allocates and frees many large buffers per step; mimalloc reuses
// them instead of going back to the OS each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(ergoseg_cli::run(std::env::args_os()));
}
