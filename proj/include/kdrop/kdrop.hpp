#pragma once

#include "kdrop/bayes_dropout.hpp"
#include "kdrop/calibration.hpp"
#include "kdrop/data_io.hpp"
#include "kdrop/dataset.hpp"
#include "kdrop/error.hpp"
#include "kdrop/experiment.hpp"
#include "kdrop/kernels.hpp"
#include "kdrop/matrix.hpp"
#include "kdrop/outputs.hpp"
#include "kdrop/random.hpp"
#include "kdrop/splits.hpp"
#include "kdrop/svg.hpp"
#include "kdrop/training.hpp"
