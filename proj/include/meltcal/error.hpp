#ifndef MELTCAL_ERROR_HPP
#define MELTCAL_ERROR_HPP

#include <stdexcept>
#include <string>

namespace meltcal {

/// Base of every error the toolkit throws. The category is a short
/// machine-parsable token the CLI prints on failure.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct ParseError : Error {
    explicit ParseError(const std::string& what) : Error("parse", what) {}
};

struct PreconditionError : Error {
    explicit PreconditionError(const std::string& what) : Error("precondition", what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

struct AdapterError : Error {
    AdapterError(const std::string& what, std::string captured)
        : Error("adapter", what), captured_output(std::move(captured)) {}
    std::string captured_output;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io", what) {}
};

struct StageError : Error {
    StageError(std::string stage_name, const std::string& what)
        : Error("stage", stage_name + ": " + what), stage(std::move(stage_name)) {}
    std::string stage;
};

} // namespace meltcal

#endif // MELTCAL_ERROR_HPP
