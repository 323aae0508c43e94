#pragma once

#include "mesurv/error.hpp"
#include "mesurv/data.hpp"
#include "mesurv/spline.hpp"
#include "mesurv/random.hpp"
#include "mesurv/quadrature.hpp"
#include "mesurv/random_effects.hpp"
#include "mesurv/family.hpp"
#include "mesurv/model.hpp"
#include "mesurv/likelihood.hpp"
#include "mesurv/optimize.hpp"
#include "mesurv/estimation.hpp"
#include "mesurv/prediction.hpp"
#include "mesurv/simulate.hpp"
#include "mesurv/model_file.hpp"
