#pragma once

#include <stdexcept>
#include <string>

namespace ctd {

/// Domain error with a machine-readable kind. The CLI maps these to
/// error JSON and exit code 1; usage errors exit with code 2.
class Error : public std::runtime_error {
public:
    enum class Kind {
        parse,       // malformed input file
        validation,  // schema/invariant violation
        io,          // filesystem failure
        shape,       // array shape mismatch
        protocol,    // evaluation protocol violation
        config,      // bad configuration value
    };

    Error(Kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    Kind kind() const { return kind_; }

    const char* kind_name() const {
        switch (kind_) {
            case Kind::parse: return "parse";
            case Kind::validation: return "validation";
            case Kind::io: return "io";
            case Kind::shape: return "shape";
            case Kind::protocol: return "protocol";
            case Kind::config: return "config";
        }
        return "unknown";
    }

private:
    Kind kind_;
};

inline void check(bool cond, Error::Kind kind, const std::string& message) {
    if (!cond) throw Error(kind, message);
}

}  // namespace ctd
