#pragma once

namespace gcrl {

// Full command-line entry point (wrapped by tools/main.cpp and callable from
// tests). Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config
// validation failure.
int cli_main(int argc, const char* const* argv);

} // namespace gcrl
