#pragma once

namespace segedit {

// Exit codes: 0 success, 1 usage or configuration error, 2 backend failure.
int run_cli(int argc, char** argv);

}  // namespace segedit
