#pragma once

#include <vector>

#include "mkid/errors.hpp"

namespace mkid {

// Polynomial evaluated on a normalized argument u = (x - center) / scale.
// Fits store coefficients in u to keep normal equations well conditioned at
// gigahertz abscissae; center/scale travel with the coefficients.
template <typename T>
struct ScaledPoly {
    double center = 0.0;
    double scale = 1.0;
    std::vector<T> coeffs;  // c0 + c1 u + c2 u^2 + ...

    T eval(double x) const {
        if (coeffs.empty()) throw InvalidInput("ScaledPoly: no coefficients");
        const double u = (x - center) / scale;
        T acc = coeffs.back();
        for (auto it = coeffs.rbegin() + 1; it != coeffs.rend(); ++it) {
            acc = acc * u + *it;
        }
        return acc;
    }

    int degree() const { return static_cast<int>(coeffs.size()) - 1; }

    static ScaledPoly constant(T value) { return {0.0, 1.0, {value}}; }
};

}  // namespace mkid
