class NumericalBreakdownError(ArithmeticError):
    """A fit produced a non-finite or significantly negative error.

    ``model_index`` identifies the offending model when several are fitted
    together.
    """

    def __init__(self, message, model_index=None):
        if model_index is not None:
            message = f"model {model_index}: {message}"
        super().__init__(message)
        self.model_index = model_index
