#pragma once

#include <stdexcept>
#include <string>

namespace shapreg {

// Pipeline stage an error belongs to. Values double as process exit codes,
// so the CLI can map any library failure to the documented code directly.
enum class Stage : int {
    config = 2,
    ingestion = 3,
    training = 4,
    decomposition = 5,
    inference = 6,
};

class Error : public std::runtime_error {
public:
    Error(Stage stage, const std::string& what)
        : std::runtime_error(what), stage_(stage) {}

    Stage stage() const { return stage_; }
    int exit_code() const { return static_cast<int>(stage_); }

private:
    Stage stage_;
};

[[noreturn]] inline void fail(Stage stage, const std::string& what) {
    throw Error(stage, what);
}

} // namespace shapreg
